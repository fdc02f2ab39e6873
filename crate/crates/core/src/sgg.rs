//! Minimal fully supervised scene-graph model trained on pseudo ground truth:
//! a linear object classifier over proposal features and a two-layer
//! predicate classifier over subject/object features plus pair geometry.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::{debug, warn};
use ndarray::{Array2, ArrayView2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{iou, Detection, PredictedTriplet, SceneGraphPrediction};
use crate::grounder::rows_to_matrix;
use crate::ir::{BBox, ImageRecord, PseudoSceneGraph};
use crate::nn::{Activation, Adam, AdamConfig, Linear, Mlp, Params};
use crate::rng::{substream, substream_seed, INIT, SAMPLER, TRAINER};
use crate::scalar::{softmax, Scalar};

/// Length of the pair geometry vector.
pub const GEOMETRY_DIM: usize = 5;
/// Predicate index reserved for "no relation".
pub const BACKGROUND: usize = 0;

/// Object and predicate vocabularies. Predicate logit `p + 1` belongs to
/// `predicates[p]`; logit 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub objects: Vec<String>,
    pub predicates: Vec<String>,
}

impl LabelSpace {
    /// Sorted labels observed in `graphs`.
    pub fn from_pseudo(graphs: &[PseudoSceneGraph]) -> Self {
        let objects: BTreeSet<&str> = graphs
            .iter()
            .flat_map(|g| g.grounded_entities.iter().map(|e| e.lemma.as_str()))
            .collect();
        let predicates: BTreeSet<&str> = graphs.iter().flat_map(|g| g.edges.iter().map(|e| e.1.as_str())).collect();
        LabelSpace {
            objects: objects.into_iter().map(String::from).collect(),
            predicates: predicates.into_iter().map(String::from).collect(),
        }
    }

    pub fn object_index(&self) -> BTreeMap<&str, usize> {
        self.objects.iter().enumerate().map(|(i, o)| (o.as_str(), i)).collect()
    }

    pub fn predicate_index(&self) -> BTreeMap<&str, usize> {
        self.predicates.iter().enumerate().map(|(i, p)| (p.as_str(), i + 1)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.predicates.is_empty() {
            return Err(Error::Config("label spaces must be nonempty".into()));
        }
        let unique = |v: &[String]| v.iter().collect::<BTreeSet<_>>().len() == v.len();
        if !unique(&self.objects) || !unique(&self.predicates) {
            return Err(Error::Config("label spaces contain duplicates".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SggConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden_dim: usize,
    /// Background pairs sampled per labeled pair.
    pub background_ratio: usize,
    pub max_triplets: usize,
    pub seed: u64,
    /// Fixed vocabularies; taken from the pseudo graphs when absent.
    pub labels: Option<LabelSpace>,
}

impl Default for SggConfig {
    fn default() -> Self {
        SggConfig {
            epochs: 60,
            learning_rate: 1e-3,
            hidden_dim: 64,
            background_ratio: 3,
            max_triplets: 100,
            seed: 0,
            labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SggParams<T> {
    pub format: String,
    pub labels: LabelSpace,
    pub feature_dim: usize,
    pub object: Linear<T>,
    pub predicate: Mlp<T>,
}

impl<T: Scalar> SggParams<T> {
    pub const FORMAT: &'static str = "wssgg-sgg-v1";

    pub fn init(labels: LabelSpace, feature_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = substream(seed, INIT);
        let object = Linear::init(feature_dim, labels.objects.len(), &mut rng);
        let predicate = Mlp::init(
            2 * feature_dim + GEOMETRY_DIM,
            hidden_dim,
            labels.predicates.len() + 1,
            Activation::Relu,
            &mut rng,
        );
        SggParams {
            format: Self::FORMAT.to_string(),
            labels,
            feature_dim,
            object,
            predicate,
        }
    }

    fn zeros_like(&self) -> Self {
        SggParams {
            format: self.format.clone(),
            labels: self.labels.clone(),
            feature_dim: self.feature_dim,
            object: Linear::zeros(self.object.input_dim(), self.object.output_dim()),
            predicate: self.predicate.zeros_like(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = crate::io::read_json(path)?;
        if p.format != Self::FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format {:?}", p.format)));
        }
        if !p.all_finite() {
            return Err(Error::Config("checkpoint contains non-finite parameters".into()));
        }
        Ok(p)
    }
}

impl<T: Scalar> Params<T> for SggParams<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut v = self.object.tensors();
        v.extend(self.predicate.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.object.tensors_mut();
        v.extend(self.predicate.tensors_mut());
        v
    }
}

/// `(Δx / w_s, Δy / h_s, log(w_o / w_s), log(h_o / h_s), IoU)` between box
/// centers of subject `s` and object `o`.
pub fn pair_geometry(s: &BBox<f64>, o: &BBox<f64>) -> Result<[f64; GEOMETRY_DIM]> {
    let overlap = iou(s, o)?;
    let (sx, sy) = s.center();
    let (ox, oy) = o.center();
    Ok([
        (ox - sx) / s.width(),
        (oy - sy) / s.height(),
        (o.width() / s.width()).ln(),
        (o.height() / s.height()).ln(),
        overlap,
    ])
}

fn pair_inputs<T: Scalar>(image: &ImageRecord, features: ArrayView2<T>, pairs: &[(usize, usize)]) -> Result<Array2<T>> {
    let d = features.ncols();
    let mut x = Array2::zeros((pairs.len(), 2 * d + GEOMETRY_DIM));
    for (r, &(s, o)) in pairs.iter().enumerate() {
        let mut row = x.row_mut(r);
        row.slice_mut(ndarray::s![..d]).assign(&features.row(s));
        row.slice_mut(ndarray::s![d..2 * d]).assign(&features.row(o));
        let g = pair_geometry(&image.proposals[s].bbox, &image.proposals[o].bbox)?;
        for (k, v) in g.into_iter().enumerate() {
            row[2 * d + k] = T::lit(v);
        }
    }
    Ok(x)
}

fn feature_matrix<T: Scalar>(image: &ImageRecord, dim: usize) -> Result<Array2<T>> {
    let rows: Vec<Vec<f64>> = image.proposals.iter().map(|p| p.feature.clone()).collect();
    rows_to_matrix(&rows, dim, "proposal features")
}

/// Mean cross entropy of `logits` against `labels`; returns the loss and
/// `dL/dlogits`.
fn cross_entropy<T: Scalar>(logits: &Array2<T>, labels: &[usize]) -> (T, Array2<T>) {
    let n = T::lit(labels.len().max(1) as f64);
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = T::zero();
    for (r, &y) in labels.iter().enumerate() {
        let p = softmax(&logits.row(r).to_vec());
        loss -= p[y].max(T::min_positive_value()).ln();
        for (j, pj) in p.into_iter().enumerate() {
            grad[[r, j]] = (pj - if j == y { T::one() } else { T::zero() }) / n;
        }
    }
    (loss / n, grad)
}

/// Labeled supervision drawn for one image on one step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampledSupervision {
    /// `(proposal, object label)`.
    pub objects: Vec<(usize, usize)>,
    /// `(subject proposal, object proposal, predicate logit)`.
    pub relations: Vec<(usize, usize, usize)>,
}

/// Draws one box per entity uniformly from its candidates, resolves
/// subject/object collisions per edge, then adds background pairs.
pub fn sample_supervision<R: Rng>(
    graph: &PseudoSceneGraph,
    num_proposals: usize,
    labels: &LabelSpace,
    background_ratio: usize,
    rng: &mut R,
) -> SampledSupervision {
    let objects_idx = labels.object_index();
    let predicates_idx = labels.predicate_index();
    let chosen: Vec<usize> = graph
        .grounded_entities
        .iter()
        .map(|e| e.candidates.choose(rng).map_or(0, |c| c.0))
        .collect();
    let mut out = SampledSupervision::default();
    for (e, &p) in graph.grounded_entities.iter().zip(&chosen) {
        if let Some(&label) = objects_idx.get(e.lemma.as_str()) {
            out.objects.push((p, label));
        }
    }
    let mut positive = BTreeSet::new();
    for edge in &graph.edges {
        let Some(&pred) = predicates_idx.get(edge.1.as_str()) else { continue };
        let s = chosen[edge.0];
        let mut o = chosen[edge.2];
        if s == o {
            let entity = &graph.grounded_entities[edge.2];
            let others: Vec<usize> = entity.candidates.iter().map(|c| c.0).filter(|&c| c != s).collect();
            match others.choose(rng) {
                Some(&c) => o = c,
                None => match entity.reserve {
                    Some(r) if r.0 != s => o = r.0,
                    _ => continue,
                },
            }
        }
        if positive.insert((s, o)) {
            out.relations.push((s, o, pred));
        }
    }
    let wanted = background_ratio * out.relations.len();
    if wanted > 0 {
        let mut pool: Vec<(usize, usize)> = (0..num_proposals)
            .flat_map(|s| (0..num_proposals).map(move |o| (s, o)))
            .filter(|&(s, o)| s != o && !positive.contains(&(s, o)))
            .collect();
        pool.shuffle(rng);
        out.relations
            .extend(pool.into_iter().take(wanted).map(|(s, o)| (s, o, BACKGROUND)));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SggEpochLog {
    pub epoch: usize,
    pub object_loss: f64,
    pub relation_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct SggOutcome<T> {
    pub params: SggParams<T>,
    pub log: Vec<SggEpochLog>,
}

/// One optimizer step per image, images shuffled every epoch. Logged losses
/// are means over images.
pub fn sgg_train<T: Scalar>(graphs: &[PseudoSceneGraph], images: &[ImageRecord], cfg: &SggConfig) -> Result<SggOutcome<T>> {
    if graphs.is_empty() {
        return Err(Error::Empty("pseudo scene graphs"));
    }
    if cfg.hidden_dim == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("hidden width and learning rate must be positive".into()));
    }
    let labels = cfg.labels.clone().unwrap_or_else(|| LabelSpace::from_pseudo(graphs));
    labels.validate()?;
    let by_id: BTreeMap<&str, &ImageRecord> = images.iter().map(|i| (i.image_id.as_str(), i)).collect();
    let mut data = Vec::with_capacity(graphs.len());
    let mut feature_dim = None;
    for g in graphs {
        let image = *by_id.get(g.image_id.as_str()).ok_or_else(|| Error::ProviderMiss {
            what: "image record",
            key: g.image_id.clone(),
        })?;
        if image.proposals.is_empty() {
            warn!("skipping {}: image has no proposals", g.image_id);
            continue;
        }
        g.validate(image.proposals.len())?;
        let d = *feature_dim.get_or_insert(image.feature_dim().unwrap_or(0));
        image.validate(Some(d))?;
        data.push((g, image, feature_matrix::<T>(image, d)?));
    }
    let feature_dim = feature_dim.ok_or(Error::Empty("pseudo scene graphs with proposals"))?;

    let mut params = SggParams::<T>::init(labels, feature_dim, cfg.hidden_dim, substream_seed(cfg.seed, "sgg"));
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &params,
    );
    let mut order_rng = substream(cfg.seed, TRAINER);
    let mut sampler = substream(cfg.seed, SAMPLER);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut obj_sum, mut rel_sum) = (0.0, 0.0);
        for &i in &order {
            let (graph, image, features) = &data[i];
            let sup = sample_supervision(graph, image.proposals.len(), &params.labels, cfg.background_ratio, &mut sampler);
            let (lo, lr, grads) = step_gradients(&params, image, features.view(), &sup)?;
            if !(lo.is_finite() && lr.is_finite()) || !grads.all_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: i,
                    detail: format!("object loss {lo:?}, relation loss {lr:?} on {}", image.image_id),
                });
            }
            opt.step(&mut params, &grads);
            obj_sum += lo.to_f64_lossy();
            rel_sum += lr.to_f64_lossy();
        }
        let n = data.len().max(1) as f64;
        let entry = SggEpochLog {
            epoch: epoch + 1,
            object_loss: obj_sum / n,
            relation_loss: rel_sum / n,
            total: (obj_sum + rel_sum) / n,
        };
        debug!("sgg epoch {}: {:?}", entry.epoch, entry);
        log.push(entry);
    }
    Ok(SggOutcome { params, log })
}

/// `L_obj + L_rel` on one image's sampled supervision, with gradients.
pub fn step_gradients<T: Scalar>(
    params: &SggParams<T>,
    image: &ImageRecord,
    features: ArrayView2<T>,
    sup: &SampledSupervision,
) -> Result<(T, T, SggParams<T>)> {
    let mut grads = params.zeros_like();
    let mut obj_loss = T::zero();
    if !sup.objects.is_empty() {
        let rows: Vec<usize> = sup.objects.iter().map(|o| o.0).collect();
        let x = features.select(ndarray::Axis(0), &rows);
        let logits = params.object.forward(x.view())?;
        let y: Vec<usize> = sup.objects.iter().map(|o| o.1).collect();
        let (l, d) = cross_entropy(&logits, &y);
        obj_loss = l;
        params.object.backward(x.view(), d.view(), &mut grads.object);
    }
    let mut rel_loss = T::zero();
    if !sup.relations.is_empty() {
        let pairs: Vec<(usize, usize)> = sup.relations.iter().map(|r| (r.0, r.1)).collect();
        let x = pair_inputs(image, features, &pairs)?;
        let (logits, cache) = params.predicate.forward_cached(x.view())?;
        let y: Vec<usize> = sup.relations.iter().map(|r| r.2).collect();
        let (l, d) = cross_entropy(&logits, &y);
        rel_loss = l;
        params.predicate.backward(&cache, d.view(), &mut grads.predicate);
    }
    Ok((obj_loss, rel_loss, grads))
}

/// Labels every proposal, scores every ordered pair with its best
/// non-background predicate, and keeps the `max_triplets` most confident.
pub fn sgg_predict<T: Scalar>(image: &ImageRecord, params: &SggParams<T>, max_triplets: usize) -> Result<SceneGraphPrediction> {
    let n = image.proposals.len();
    let mut prediction = SceneGraphPrediction {
        image_id: image.image_id.clone(),
        detections: Vec::with_capacity(n),
        triplets: Vec::new(),
    };
    if n == 0 {
        return Ok(prediction);
    }
    let features = feature_matrix::<T>(image, params.feature_dim)?;
    let logits = params.object.forward(features.view())?;
    let mut labels = Vec::with_capacity(n);
    for (j, row) in logits.rows().into_iter().enumerate() {
        let p = softmax(&row.to_vec());
        let best = crate::scalar::argmax(&p).expect("nonempty label space");
        let score = p[best].to_f64_lossy();
        labels.push((best, score));
        prediction.detections.push(Detection {
            bbox: image.proposals[j].bbox,
            label: params.labels.objects[best].clone(),
            score,
        });
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|s| (0..n).map(move |o| (s, o))).filter(|(s, o)| s != o).collect();
    if pairs.is_empty() {
        return Ok(prediction);
    }
    let x = pair_inputs(image, features.view(), &pairs)?;
    let rel = params.predicate.forward(x.view())?;
    let mut scored: Vec<(f64, usize, usize, usize)> = Vec::with_capacity(pairs.len());
    for (r, &(s, o)) in pairs.iter().enumerate() {
        let p = softmax(&rel.row(r).to_vec());
        let (pred, prob) = p
            .iter()
            .enumerate()
            .skip(1)
            .fold((1, T::neg_infinity()), |best, (k, &v)| if v > best.1 { (k, v) } else { best });
        let conf = labels[s].1 * labels[o].1 * prob.to_f64_lossy();
        scored.push((conf, s, o, pred));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    scored.truncate(max_triplets);
    prediction.triplets = scored
        .into_iter()
        .map(|(score, s, o, pred)| PredictedTriplet {
            s_box: image.proposals[s].bbox,
            s_label: params.labels.objects[labels[s].0].clone(),
            predicate: params.labels.predicates[pred - 1].clone(),
            o_box: image.proposals[o].bbox,
            o_label: params.labels.objects[labels[o].0].clone(),
            score,
        })
        .collect();
    Ok(prediction)
}

pub fn write_sgg_log(path: &Path, log: &[SggEpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(crate::io::create(path)?);
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{Candidate, Edge, GroundedEntity, RegionProposal};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(n: usize) -> ImageRecord {
        ImageRecord {
            image_id: "img".into(),
            width: 100.0,
            height: 100.0,
            proposals: (0..n)
                .map(|j| RegionProposal {
                    bbox: BBox {
                        x1: 10.0 * j as f64,
                        y1: 5.0,
                        x2: 10.0 * j as f64 + 8.0,
                        y2: 20.0 + j as f64,
                    },
                    label: "thing".into(),
                    score: 0.9,
                    feature: (0..3).map(|k| ((j * 3 + k) as f64 * 0.37).sin()).collect(),
                })
                .collect(),
        }
    }

    fn labels() -> LabelSpace {
        LabelSpace {
            objects: vec!["dog".into(), "man".into()],
            predicates: vec!["near".into(), "on".into()],
        }
    }

    fn entity(lemma: &str, candidates: &[usize], reserve: Option<usize>) -> GroundedEntity {
        GroundedEntity {
            lemma: lemma.into(),
            candidates: candidates.iter().map(|&c| Candidate(c, 1.0)).collect(),
            reserve: reserve.map(|r| Candidate(r, 0.5)),
        }
    }

    #[test]
    fn geometry_of_identical_boxes() {
        let b = BBox { x1: 0.0, y1: 0.0, x2: 2.0, y2: 4.0 };
        assert_eq!(pair_geometry(&b, &b).unwrap(), [0.0, 0.0, 0.0, 0.0, 1.0]);
        let o = BBox { x1: 2.0, y1: 0.0, x2: 6.0, y2: 4.0 };
        let g = pair_geometry(&b, &o).unwrap();
        assert_eq!(g[0], 1.5);
        assert!((g[2] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_proposal_has_no_triplets() {
        let p = SggParams::<f64>::init(labels(), 3, 4, 0);
        let out = sgg_predict(&image(1), &p, 100).unwrap();
        assert!(out.triplets.is_empty());
        assert_eq!(out.detections.len(), 1);
        let out = sgg_predict(&image(2), &p, 100).unwrap();
        assert!(out.triplets.len() <= 2);
    }

    #[test]
    fn predictions_are_sorted_with_one_predicate_per_pair() {
        let p = SggParams::<f64>::init(labels(), 3, 4, 1);
        let out = sgg_predict(&image(5), &p, 100).unwrap();
        assert_eq!(out.triplets.len(), 20);
        assert!(out.triplets.windows(2).all(|w| w[0].score >= w[1].score));
        let pairs: BTreeSet<_> = out
            .triplets
            .iter()
            .map(|t| (t.s_box.x1.to_bits(), t.o_box.x1.to_bits()))
            .collect();
        assert_eq!(pairs.len(), 20);
        assert_eq!(sgg_predict(&image(5), &p, 7).unwrap().triplets.len(), 7);
    }

    #[test]
    fn collisions_redraw_then_fall_back_then_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let graph = |obj: GroundedEntity| PseudoSceneGraph {
            image_id: "img".into(),
            grounded_entities: vec![entity("man", &[2], None), obj],
            edges: vec![Edge(0, "on".into(), 1)],
        };
        for _ in 0..50 {
            let sup = sample_supervision(&graph(entity("dog", &[2, 3], None)), 4, &labels(), 0, &mut rng);
            assert_eq!(sup.relations, vec![(2, 3, 2)]);
        }
        let sup = sample_supervision(&graph(entity("dog", &[2], Some(1))), 4, &labels(), 0, &mut rng);
        assert_eq!(sup.relations, vec![(2, 1, 2)]);
        let sup = sample_supervision(&graph(entity("dog", &[2], None)), 4, &labels(), 0, &mut rng);
        assert!(sup.relations.is_empty());
        assert_eq!(sup.objects, vec![(2, 1), (2, 0)]);
    }

    #[test]
    fn background_pairs_follow_the_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = PseudoSceneGraph {
            image_id: "img".into(),
            grounded_entities: vec![entity("man", &[0], None), entity("dog", &[1], None)],
            edges: vec![Edge(0, "near".into(), 1)],
        };
        let sup = sample_supervision(&g, 5, &labels(), 3, &mut rng);
        assert_eq!(sup.relations.len(), 4);
        assert_eq!(sup.relations.iter().filter(|r| r.2 == BACKGROUND).count(), 3);
        assert!(sup.relations[1..].iter().all(|r| r.0 != r.1 && (r.0, r.1) != (0, 1)));
    }

    #[test]
    fn zero_epochs_is_the_initialization() {
        let g = PseudoSceneGraph {
            image_id: "img".into(),
            grounded_entities: vec![entity("man", &[0], None), entity("dog", &[1], None)],
            edges: vec![Edge(0, "near".into(), 1)],
        };
        let cfg = SggConfig {
            epochs: 0,
            hidden_dim: 4,
            labels: Some(labels()),
            ..SggConfig::default()
        };
        let out = sgg_train::<f64>(&[g], &[image(3)], &cfg).unwrap();
        assert_eq!(out.params, SggParams::init(labels(), 3, 4, substream_seed(0, "sgg")));
    }

    #[test]
    fn training_fits_a_fixed_labeling() {
        let g = PseudoSceneGraph {
            image_id: "img".into(),
            grounded_entities: vec![entity("man", &[0], None), entity("dog", &[1], None)],
            edges: vec![Edge(0, "near".into(), 1)],
        };
        let cfg = SggConfig {
            epochs: 300,
            learning_rate: 1e-2,
            hidden_dim: 16,
            background_ratio: 0,
            labels: Some(labels()),
            ..SggConfig::default()
        };
        let out = sgg_train::<f64>(&[g], &[image(3)], &cfg).unwrap();
        assert!(out.log.last().unwrap().total < 0.1, "{:?}", out.log.last());
        let pred = sgg_predict(&image(3), &out.params, 100).unwrap();
        assert_eq!(pred.detections[0].label, "man");
        assert_eq!(pred.detections[1].label, "dog");
    }
}
