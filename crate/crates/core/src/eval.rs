//! Scene-graph detection metrics: IoU, triplet Recall@K and detection mAP.
//!
//! All metrics are generic over [`Metric`] so they can run on exact rationals.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::GtRecord;
use crate::ir::BBox;
use crate::scalar::Metric;

/// Overlap threshold for a box to count as localized.
pub const IOU_THRESHOLD: f64 = 0.5;

pub fn iou<T: Metric>(a: &BBox<T>, b: &BBox<T>) -> Result<T> {
    if !a.has_area() {
        return Err(a.zero_area_error());
    }
    if !b.has_area() {
        return Err(b.zero_area_error());
    }
    let inter = a.intersection_area(b);
    Ok(inter / (a.area() + b.area() - inter))
}

fn localized<T: Metric>(a: &BBox<T>, b: &BBox<T>) -> Result<bool> {
    let threshold = T::from_f64(IOU_THRESHOLD).expect("threshold representable");
    Ok(iou(a, b)? >= threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize + Copy", deserialize = "T: Deserialize<'de> + Copy"))]
pub struct PredictedTriplet<T> {
    pub s_box: BBox<T>,
    pub s_label: String,
    pub predicate: String,
    pub o_box: BBox<T>,
    pub o_label: String,
    pub score: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize + Copy", deserialize = "T: Deserialize<'de> + Copy"))]
pub struct GtTriplet<T> {
    pub s_box: BBox<T>,
    pub s_label: String,
    pub predicate: String,
    pub o_box: BBox<T>,
    pub o_label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize + Copy", deserialize = "T: Deserialize<'de> + Copy"))]
pub struct Detection<T> {
    #[serde(rename = "box")]
    pub bbox: BBox<T>,
    pub label: String,
    pub score: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize + Copy", deserialize = "T: Deserialize<'de> + Copy"))]
pub struct GtBox<T> {
    #[serde(rename = "box")]
    pub bbox: BBox<T>,
    pub label: String,
}

/// Predicted scene graph of one image, as written by `sgg-predict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraphPrediction {
    pub image_id: String,
    #[serde(default)]
    pub detections: Vec<Detection<f64>>,
    pub triplets: Vec<PredictedTriplet<f64>>,
}

fn triplet_matches<T: Metric>(p: &PredictedTriplet<T>, g: &GtTriplet<T>) -> Result<bool> {
    Ok(p.s_label == g.s_label
        && p.o_label == g.o_label
        && p.predicate == g.predicate
        && localized(&p.s_box, &g.s_box)?
        && localized(&p.o_box, &g.o_box)?)
}

/// Indices of `scores` by descending score, ties by position.
fn confidence_order<T: Metric>(scores: impl Iterator<Item = T>) -> Vec<usize> {
    let scores: Vec<T> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Number of ground-truth triplets matched by the `k` most confident
/// predictions.
///
/// Predictions are visited in confidence order; each one claims a free
/// ground truth or, failing that, re-routes an earlier claim along an
/// augmenting path. A claimed prediction therefore never loses its match, and
/// the final count is the largest one-to-one matching available in the top K.
pub fn matched_at_k<T: Metric>(predictions: &[PredictedTriplet<T>], gt: &[GtTriplet<T>], k: usize) -> Result<usize> {
    let order = confidence_order(predictions.iter().map(|p| p.score));
    let top: Vec<&PredictedTriplet<T>> = order.iter().take(k).map(|&i| &predictions[i]).collect();
    let mut adjacency = Vec::with_capacity(top.len());
    for p in &top {
        let mut row = Vec::new();
        for (g, t) in gt.iter().enumerate() {
            if triplet_matches(p, t)? {
                row.push(g);
            }
        }
        adjacency.push(row);
    }
    let mut owner: Vec<Option<usize>> = vec![None; gt.len()];
    let mut matched = 0;
    for p in 0..top.len() {
        let mut seen = vec![false; gt.len()];
        if augment(p, &adjacency, &mut owner, &mut seen) {
            matched += 1;
        }
    }
    Ok(matched)
}

fn augment(p: usize, adjacency: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &g in &adjacency[p] {
        if seen[g] {
            continue;
        }
        seen[g] = true;
        if owner[g].is_none_or(|q| augment(q, adjacency, owner, seen)) {
            owner[g] = Some(p);
            return true;
        }
    }
    false
}

pub fn recall_at_k<T: Metric>(predictions: &[PredictedTriplet<T>], gt: &[GtTriplet<T>], k: usize) -> Result<T> {
    if gt.is_empty() {
        return Err(Error::Empty("ground-truth triplets"));
    }
    let m = matched_at_k(predictions, gt, k)?;
    Ok(T::from_usize_exact(m) / T::from_usize_exact(gt.len()))
}

/// Average precision of one class from its confidence-ranked true/false
/// positive flags, with all-point interpolation.
pub fn average_precision<T: Metric>(hits: &[bool], num_gt: usize) -> T {
    if num_gt == 0 {
        return T::zero();
    }
    let n = T::from_usize_exact(num_gt);
    let mut precisions = Vec::with_capacity(hits.len());
    let mut tp = 0;
    for (i, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        precisions.push(T::from_usize_exact(tp) / T::from_usize_exact(i + 1));
    }
    // running maximum from the right gives the interpolated precision
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max_of(precisions[i + 1]);
    }
    hits.iter()
        .zip(&precisions)
        .filter(|(&h, _)| h)
        .fold(T::zero(), |acc, (_, &p)| acc + p)
        / n
}

/// Mean over ground-truth classes of per-class AP at IoU 0.5.
///
/// Detections of a class are ranked by confidence across all images (ties by
/// image then detection index); each is matched to the unclaimed
/// ground-truth box of its class in the same image with the highest IoU, if
/// that IoU reaches the threshold.
pub fn detection_map<T: Metric>(detections: &[Vec<Detection<T>>], gt: &[Vec<GtBox<T>>]) -> Result<T> {
    Ok(per_class_ap(detections, gt)?.into_values().fold(T::zero(), |a, b| a + b) / {
        let classes: BTreeSet<&str> = gt.iter().flatten().map(|g| g.label.as_str()).collect();
        T::from_usize_exact(classes.len())
    })
}

pub fn per_class_ap<T: Metric>(detections: &[Vec<Detection<T>>], gt: &[Vec<GtBox<T>>]) -> Result<BTreeMap<String, T>> {
    if detections.len() != gt.len() {
        return Err(Error::Dimension {
            context: "images with detections",
            expected: gt.len(),
            actual: detections.len(),
        });
    }
    let classes: BTreeSet<&str> = gt.iter().flatten().map(|g| g.label.as_str()).collect();
    if classes.is_empty() {
        return Err(Error::Empty("ground-truth boxes"));
    }
    let mut out = BTreeMap::new();
    for class in classes {
        let mut ranked: Vec<(usize, usize, T)> = Vec::new();
        for (img, dets) in detections.iter().enumerate() {
            for (d, det) in dets.iter().enumerate().filter(|(_, d)| d.label == class) {
                ranked.push((img, d, det.score));
            }
        }
        let order = confidence_order(ranked.iter().map(|r| r.2));
        let mut claimed: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
        let mut hits = Vec::with_capacity(ranked.len());
        for &r in &order {
            let (img, d, _) = ranked[r];
            let det = &detections[img][d];
            let mut best: Option<(usize, T)> = None;
            for (g, truth) in gt[img].iter().enumerate() {
                if truth.label != class || claimed[img][g] {
                    continue;
                }
                let o = iou(&det.bbox, &truth.bbox)?;
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            let threshold = T::from_f64(IOU_THRESHOLD).expect("threshold representable");
            match best {
                Some((g, o)) if o >= threshold => {
                    claimed[img][g] = true;
                    hits.push(true);
                }
                _ => hits.push(false),
            }
        }
        let num_gt = gt.iter().flatten().filter(|g| g.label == class).count();
        out.insert(class.to_string(), average_precision(&hits, num_gt));
    }
    Ok(out)
}

/// Triplets of a ground-truth record with boxes and labels resolved.
pub fn gt_triplets(record: &GtRecord) -> Result<Vec<GtTriplet<f64>>> {
    record
        .relations
        .iter()
        .map(|(s, p, o)| {
            let get = |i: usize| {
                record.objects.get(i).ok_or_else(|| Error::InvalidRecord {
                    image_id: record.image_id.clone(),
                    reason: format!("relation references missing object {i}"),
                })
            };
            let (s, o) = (get(*s)?, get(*o)?);
            Ok(GtTriplet {
                s_box: s.bbox,
                s_label: s.label.clone(),
                predicate: p.clone(),
                o_box: o.bbox,
                o_label: o.label.clone(),
            })
        })
        .collect()
}

/// Metric requested on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MetricSpec {
    RecallAt(usize),
    Map,
}

impl MetricSpec {
    pub fn name(&self) -> String {
        match self {
            MetricSpec::RecallAt(k) => format!("recall@{k}"),
            MetricSpec::Map => "map".to_string(),
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<MetricSpec>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                let lower = t.to_ascii_lowercase();
                if lower == "map" {
                    return Ok(MetricSpec::Map);
                }
                lower
                    .strip_prefix("recall@")
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k > 0)
                    .map(MetricSpec::RecallAt)
                    .ok_or_else(|| Error::Config(format!("unknown metric {t:?}")))
            })
            .collect()
    }

    pub fn defaults() -> Vec<MetricSpec> {
        vec![
            MetricSpec::RecallAt(20),
            MetricSpec::RecallAt(50),
            MetricSpec::RecallAt(100),
            MetricSpec::Map,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecall {
    pub image_id: String,
    pub num_gt: usize,
    /// Keyed by metric name, e.g. `recall@50`.
    pub recall: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_images: usize,
    pub num_gt_triplets: usize,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_class_ap: BTreeMap<String, f64>,
    #[serde(skip)]
    pub per_image: Vec<ImageRecall>,
}

/// Scores predictions against ground truth. Recall is the mean over images
/// with at least one ground-truth triplet; images without a prediction record
/// count as empty predictions.
pub fn evaluate(predictions: &[SceneGraphPrediction], gt: &[GtRecord], metrics: &[MetricSpec]) -> Result<EvalReport> {
    if gt.is_empty() {
        return Err(Error::Empty("ground-truth records"));
    }
    let by_id: BTreeMap<&str, &SceneGraphPrediction> = predictions.iter().map(|p| (p.image_id.as_str(), p)).collect();
    let mut report = EvalReport {
        num_images: gt.len(),
        num_gt_triplets: 0,
        metrics: BTreeMap::new(),
        per_class_ap: BTreeMap::new(),
        per_image: Vec::new(),
    };
    let ks: Vec<usize> = metrics
        .iter()
        .filter_map(|m| match m {
            MetricSpec::RecallAt(k) => Some(*k),
            MetricSpec::Map => None,
        })
        .collect();
    let mut sums = vec![0.0; ks.len()];
    let empty = Vec::new();
    for record in gt {
        let triplets = gt_triplets(record)?;
        if triplets.is_empty() {
            continue;
        }
        report.num_gt_triplets += triplets.len();
        let preds = by_id.get(record.image_id.as_str()).map_or(&empty, |p| &p.triplets);
        let mut row = ImageRecall {
            image_id: record.image_id.clone(),
            num_gt: triplets.len(),
            recall: BTreeMap::new(),
        };
        for (i, &k) in ks.iter().enumerate() {
            let r = recall_at_k(preds, &triplets, k)?;
            sums[i] += r;
            row.recall.insert(MetricSpec::RecallAt(k).name(), r);
        }
        report.per_image.push(row);
    }
    let counted = report.per_image.len();
    for (i, &k) in ks.iter().enumerate() {
        let mean = if counted == 0 { 0.0 } else { sums[i] / counted as f64 };
        report.metrics.insert(MetricSpec::RecallAt(k).name(), mean);
    }
    if metrics.contains(&MetricSpec::Map) {
        let dets: Vec<Vec<Detection<f64>>> = gt
            .iter()
            .map(|r| by_id.get(r.image_id.as_str()).map_or_else(Vec::new, |p| p.detections.clone()))
            .collect();
        let boxes: Vec<Vec<GtBox<f64>>> = gt
            .iter()
            .map(|r| {
                r.objects
                    .iter()
                    .map(|o| GtBox {
                        bbox: o.bbox,
                        label: o.label.clone(),
                    })
                    .collect()
            })
            .collect();
        let per_class = per_class_ap(&dets, &boxes)?;
        let map = per_class.values().sum::<f64>() / per_class.len() as f64;
        report.metrics.insert("map".into(), map);
        report.per_class_ap = per_class;
    }
    Ok(report)
}

pub fn write_per_image_csv(path: &Path, rows: &[ImageRecall]) -> Result<()> {
    let names: Vec<String> = rows
        .first()
        .map(|r| r.recall.keys().cloned().collect())
        .unwrap_or_default();
    let mut w = csv::Writer::from_writer(crate::io::create(path)?);
    let mut header = vec!["image_id".to_string(), "num_gt".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.image_id.clone(), r.num_gt.to_string()];
        rec.extend(names.iter().map(|n| format!("{}", r.recall.get(n).copied().unwrap_or(0.0))));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
