//! Synthetic datasets with known entity-to-proposal alignments.
//!
//! Every entity of a generated caption owns one true proposal. Features are a
//! category prototype plus a relation-role context vector plus Gaussian
//! noise; entity embeddings mirror that structure in the text space. The
//! detector labels and activation maps that feed the two teachers point at
//! the true proposals unless noise is configured.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::prompt_for;
use crate::io::{write_json, write_jsonl, AlignmentRecord, EmbeddingRecord, ExpertRecord, GtObject, GtRecord};
use crate::ir::{BBox, Edge, ImageRecord, RegionProposal, TextEntity, UnlocalizedSceneGraph};
use crate::parsing::{CaptionRecord, ParserRuleSet};
use crate::rng::{substream, substream_seed, GENERATOR};
use crate::teachers::ActivationMap;

/// Object vocabulary of the generator.
pub const NOUNS: [&str; 150] = [
    "airplane", "animal", "arm", "bag", "banana", "basket", "beach", "bear", "bed", "bench", "bike", "bird", "board",
    "boat", "book", "boot", "bottle", "bowl", "box", "boy", "branch", "building", "bus", "cabinet", "cap", "car",
    "cat", "chair", "child", "clock", "coat", "counter", "cow", "cup", "curtain", "desk", "dog", "door", "drawer",
    "ear", "elephant", "engine", "eye", "face", "fence", "finger", "flag", "flower", "food", "fork", "fruit",
    "giraffe", "girl", "glass", "glove", "guy", "hair", "hand", "handle", "hat", "head", "helmet", "hill", "horse",
    "house", "jacket", "jean", "kid", "kite", "lady", "lamp", "laptop", "leaf", "leg", "letter", "light", "logo",
    "man", "men", "motorcycle", "mountain", "mouth", "neck", "nose", "number", "orange", "pant", "paper", "paw",
    "people", "person", "phone", "pillow", "pizza", "plane", "plant", "plate", "player", "pole", "post", "pot",
    "racket", "railing", "rock", "roof", "room", "screen", "seat", "sheep", "shelf", "shirt", "shoe", "short",
    "sidewalk", "sign", "sink", "skateboard", "ski", "skier", "sneaker", "snow", "sock", "stand", "street",
    "surfboard", "table", "tail", "tie", "tile", "tire", "toilet", "towel", "tower", "track", "train", "tree",
    "truck", "trunk", "umbrella", "vase", "vegetable", "vehicle", "wave", "wheel", "window", "windshield", "wing",
    "wire", "woman", "zebra",
];

/// Predicate vocabulary of the generator; each is a verb, a preposition, or
/// a verb followed by a preposition.
pub const PREDICATES: [&str; 50] = [
    "above", "across", "against", "along", "at", "attached to", "behind", "belonging to", "beside", "below",
    "carrying", "covered in", "covering", "eating", "flying in", "from", "growing on", "hanging from", "has",
    "holding", "in", "inside", "laying on", "looking at", "lying on", "mounted on", "near", "on", "over",
    "painted on", "parked on", "playing", "riding", "sitting on", "standing on", "to", "under", "using",
    "walking in", "walking on", "watching", "wearing", "wears", "with", "by", "leaning on", "pulling",
    "touching", "facing", "resting on",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub images: usize,
    pub test_images: usize,
    pub categories: usize,
    pub predicates: usize,
    pub proposals: usize,
    pub triplets_per_image: usize,
    pub feature_dim: usize,
    pub text_dim: usize,
    pub expert_dim: usize,
    /// Per-dimension standard deviation of proposal feature noise.
    pub feature_noise: f64,
    pub embedding_noise: f64,
    pub expert_noise: f64,
    /// Weight of the relation-role context in features and embeddings.
    pub context_strength: f64,
    /// Factor on the context of distractor proposals. Below 1, clutter that
    /// takes part in no relation looks less like a related entity.
    pub clutter_context: f64,
    /// Probability that a detector label is replaced by another category.
    pub label_flip_rate: f64,
    /// Probability that an entity's activation peaks on a wrong proposal.
    pub activation_offset_rate: f64,
    /// Blob width relative to the half-size of the target box.
    pub activation_blur: f64,
    pub activation_amplitude: f64,
    /// Probability that a distractor proposal repeats an entity's category.
    pub duplicate_rate: f64,
    pub grid: usize,
    pub width: f64,
    pub height: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            images: 20,
            test_images: 10,
            categories: 10,
            predicates: 10,
            proposals: 12,
            triplets_per_image: 2,
            feature_dim: 32,
            text_dim: 32,
            expert_dim: 16,
            feature_noise: 0.1,
            embedding_noise: 0.1,
            expert_noise: 0.1,
            context_strength: 0.5,
            clutter_context: 1.0,
            label_flip_rate: 0.0,
            activation_offset_rate: 0.0,
            activation_blur: 0.5,
            activation_amplitude: 4.0,
            duplicate_rate: 0.3,
            grid: 16,
            width: 320.0,
            height: 320.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic dataset: {m}")));
        if self.proposals == 0 {
            return bad("at least one proposal per image is required");
        }
        if self.triplets_per_image == 0 {
            return bad("at least one triplet per image is required");
        }
        if self.proposals < 2 * self.triplets_per_image {
            return bad("every entity needs its own proposal");
        }
        if self.categories == 0 || self.categories > NOUNS.len() {
            return bad("category count outside the vocabulary");
        }
        if self.predicates < self.triplets_per_image || self.predicates > PREDICATES.len() {
            return bad("predicate count outside the vocabulary or below the triplets per image");
        }
        if self.feature_dim == 0 || self.text_dim == 0 || self.expert_dim == 0 || self.grid == 0 {
            return bad("dimensions must be positive");
        }
        for (name, p) in [
            ("label_flip_rate", self.label_flip_rate),
            ("activation_offset_rate", self.activation_offset_rate),
            ("duplicate_rate", self.duplicate_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("synthetic dataset: {name} must lie in [0, 1]")));
            }
        }
        if !(self.width >= 160.0 && self.height >= 160.0) {
            return bad("image must be at least 160x160");
        }
        if [self.feature_noise, self.embedding_noise, self.expert_noise, self.context_strength, self.clutter_context]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
            || !(self.activation_blur > 0.0 && self.activation_amplitude > 0.0)
        {
            return bad("noise levels must be finite and nonnegative");
        }
        Ok(())
    }
}

/// Everything the generator produces, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub categories: Vec<String>,
    pub predicates: Vec<String>,
    pub images: Vec<ImageRecord>,
    pub captions: Vec<CaptionRecord>,
    pub graphs: Vec<UnlocalizedSceneGraph>,
    pub embeddings: Vec<EmbeddingRecord>,
    pub activations: Vec<ActivationMap>,
    pub expert: Vec<ExpertRecord>,
    pub alignments: Vec<AlignmentRecord>,
    pub test_images: Vec<ImageRecord>,
    pub test_gt: Vec<GtRecord>,
    pub rules: ParserRuleSet,
}

/// File names inside a generated dataset directory.
pub mod files {
    pub const IMAGES: &str = "images.jsonl";
    pub const CAPTIONS: &str = "captions.jsonl";
    pub const GRAPHS: &str = "graphs.jsonl";
    pub const EMBEDDINGS: &str = "embeddings.jsonl";
    pub const ACTIVATIONS: &str = "activations.jsonl";
    pub const EXPERT: &str = "expert.jsonl";
    pub const ALIGNMENTS: &str = "alignments.jsonl";
    pub const TEST_IMAGES: &str = "test_images.jsonl";
    pub const TEST_GT: &str = "test_gt.jsonl";
    pub const RULES: &str = "rules.json";
}

impl SynthDataset {
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let p = |name: &str| dir.join(name);
        write_jsonl(&p(files::IMAGES), &self.images)?;
        write_jsonl(&p(files::CAPTIONS), &self.captions)?;
        write_jsonl(&p(files::GRAPHS), &self.graphs)?;
        write_jsonl(&p(files::EMBEDDINGS), &self.embeddings)?;
        write_jsonl(&p(files::ACTIVATIONS), &self.activations)?;
        write_jsonl(&p(files::EXPERT), &self.expert)?;
        write_jsonl(&p(files::ALIGNMENTS), &self.alignments)?;
        write_jsonl(&p(files::TEST_IMAGES), &self.test_images)?;
        write_jsonl(&p(files::TEST_GT), &self.test_gt)?;
        write_json(&p(files::RULES), &self.rules)?;
        Ok([
            files::IMAGES,
            files::CAPTIONS,
            files::GRAPHS,
            files::EMBEDDINGS,
            files::ACTIVATIONS,
            files::EXPERT,
            files::ALIGNMENTS,
            files::TEST_IMAGES,
            files::TEST_GT,
            files::RULES,
        ]
        .iter()
        .map(|f| p(f))
        .collect())
    }

    pub fn alignment_map(&self) -> BTreeMap<String, Vec<usize>> {
        self.alignments.iter().map(|a| (a.image_id.clone(), a.proposals.clone())).collect()
    }
}

/// Fixed pseudo-random direction for `key`, independent of draw order.
fn keyed_unit(root: u64, key: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(root, key));
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x / norm).collect()
}

fn add_noise<R: Rng>(v: &mut [f64], sigma: f64, rng: &mut R) {
    if sigma > 0.0 {
        for x in v.iter_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *x += sigma * n;
        }
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Subject,
    Object,
}

impl Role {
    fn tag(self) -> &'static str {
        match self {
            Role::Subject => "subj",
            Role::Object => "obj",
        }
    }
}

struct Vocab {
    seed: u64,
    cfg: SynthConfig,
}

impl Vocab {
    fn feature(&self, category: &str, predicate: &str, role: Role, context: f64) -> Vec<f64> {
        let mut v = keyed_unit(self.seed, &format!("visual/{category}"), self.cfg.feature_dim);
        let ctx = keyed_unit(self.seed, &format!("visual/{predicate}/{}", role.tag()), self.cfg.feature_dim);
        axpy(&mut v, self.cfg.context_strength * context, &ctx);
        v
    }

    fn embedding(&self, lemma: &str, predicate: &str, role: Role) -> Vec<f64> {
        let mut v = keyed_unit(self.seed, &format!("text/{lemma}"), self.cfg.text_dim);
        let ctx = keyed_unit(self.seed, &format!("text/{predicate}/{}", role.tag()), self.cfg.text_dim);
        axpy(&mut v, self.cfg.context_strength, &ctx);
        v
    }

    fn expert(&self, category: &str) -> Vec<f64> {
        keyed_unit(self.seed, &format!("expert/{}", prompt_for(category)), self.cfg.expert_dim)
    }
}

/// Offset of the object's center from the subject's, in units of the mean
/// box size, fixed per predicate.
fn predicate_offset(seed: u64, predicate: &str) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, &format!("geometry/{predicate}")));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let dist = rng.random_range(0.6..1.2);
    (dist * angle.cos(), dist * angle.sin())
}

fn random_box<R: Rng>(rng: &mut R, w: f64, h: f64, lo: f64, hi: f64) -> BBox<f64> {
    let bw = rng.random_range(lo..hi);
    let bh = rng.random_range(lo..hi);
    let x1 = rng.random_range(0.0..w - bw);
    let y1 = rng.random_range(0.0..h - bh);
    BBox {
        x1,
        y1,
        x2: x1 + bw,
        y2: y1 + bh,
    }
}

fn box_around(cx: f64, cy: f64, bw: f64, bh: f64, w: f64, h: f64) -> BBox<f64> {
    let x1 = (cx - bw / 2.0).clamp(0.0, w - bw);
    let y1 = (cy - bh / 2.0).clamp(0.0, h - bh);
    BBox {
        x1,
        y1,
        x2: x1 + bw,
        y2: y1 + bh,
    }
}

/// Activation blob centered on `target`.
fn blob(cfg: &SynthConfig, target: &BBox<f64>) -> Vec<f64> {
    let (sx, sy) = (cfg.width / cfg.grid as f64, cfg.height / cfg.grid as f64);
    let (cx, cy) = target.center();
    let (cx, cy) = (cx / sx, cy / sy);
    let rx = (cfg.activation_blur * target.width() / sx / 2.0).max(0.25);
    let ry = (cfg.activation_blur * target.height() / sy / 2.0).max(0.25);
    let mut grid = Vec::with_capacity(cfg.grid * cfg.grid);
    for r in 0..cfg.grid {
        for c in 0..cfg.grid {
            let dx = (c as f64 + 0.5 - cx) / rx;
            let dy = (r as f64 + 0.5 - cy) / ry;
            grid.push(cfg.activation_amplitude * (-(dx * dx + dy * dy) / 2.0).exp());
        }
    }
    grid
}

struct Entity {
    category: String,
    predicate: String,
    role: Role,
    bbox: BBox<f64>,
}

struct Scene {
    entities: Vec<Entity>,
    edges: Vec<Edge>,
    proposals: Vec<RegionProposal>,
    /// Proposal index of each entity.
    alignment: Vec<usize>,
    /// Category of each proposal.
    truth: Vec<String>,
}

fn scene<R: Rng>(cfg: &SynthConfig, vocab: &Vocab, categories: &[String], predicates: &[String], rng: &mut R) -> Scene {
    let mut entities = Vec::new();
    let mut edges = Vec::new();
    let chosen: Vec<&String> = predicates.choose_multiple(rng, cfg.triplets_per_image).collect();
    for pred in chosen {
        let s_cat = categories.choose(rng).expect("categories").clone();
        let o_cat = categories.choose(rng).expect("categories").clone();
        let s_box = random_box(rng, cfg.width, cfg.height, 40.0, 100.0);
        let (ow, oh) = (rng.random_range(40.0..100.0), rng.random_range(40.0..100.0));
        let (dx, dy) = predicate_offset(vocab.seed, pred);
        let (cx, cy) = s_box.center();
        let scale = (s_box.width() + s_box.height() + ow + oh) / 4.0;
        let o_box = box_around(cx + dx * scale, cy + dy * scale, ow, oh, cfg.width, cfg.height);
        let s = entities.len();
        entities.push(Entity {
            category: s_cat,
            predicate: pred.clone(),
            role: Role::Subject,
            bbox: s_box,
        });
        entities.push(Entity {
            category: o_cat,
            predicate: pred.clone(),
            role: Role::Object,
            bbox: o_box,
        });
        edges.push(Edge(s, pred.clone(), s + 1));
    }

    // true proposals first, then distractors; shuffled below
    let mut raw: Vec<(BBox<f64>, String, String, Role)> = entities
        .iter()
        .map(|e| (e.bbox, e.category.clone(), e.predicate.clone(), e.role))
        .collect();
    while raw.len() < cfg.proposals {
        let category = if rng.random_bool(cfg.duplicate_rate) {
            entities.choose(rng).expect("entities").category.clone()
        } else {
            categories.choose(rng).expect("categories").clone()
        };
        let predicate = predicates.choose(rng).expect("predicates").clone();
        let role = if rng.random_bool(0.5) { Role::Subject } else { Role::Object };
        raw.push((random_box(rng, cfg.width, cfg.height, 30.0, 100.0), category, predicate, role));
    }
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.shuffle(rng);
    let mut alignment = vec![0; entities.len()];
    for (pos, &src) in order.iter().enumerate() {
        if src < entities.len() {
            alignment[src] = pos;
        }
    }
    let mut proposals = Vec::with_capacity(raw.len());
    let mut truth = Vec::with_capacity(raw.len());
    for &src in &order {
        let (bbox, category, predicate, role) = &raw[src];
        let context = if src < entities.len() { 1.0 } else { cfg.clutter_context };
        let mut feature = vocab.feature(category, predicate, *role, context);
        add_noise(&mut feature, cfg.feature_noise, rng);
        let label = if categories.len() > 1 && rng.random_bool(cfg.label_flip_rate) {
            categories
                .iter()
                .filter(|c| *c != category)
                .collect::<Vec<_>>()
                .choose(rng)
                .map(|c| (*c).clone())
                .expect("another category")
        } else {
            category.clone()
        };
        proposals.push(RegionProposal {
            bbox: *bbox,
            label,
            score: rng.random_range(0.3..1.0),
            feature,
        });
        truth.push(category.clone());
    }
    Scene {
        entities,
        edges,
        proposals,
        alignment,
        truth,
    }
}

fn caption(entities: &[Entity], edges: &[Edge]) -> String {
    edges
        .iter()
        .map(|e| format!("a {} {} a {}", entities[e.0].category, e.1, entities[e.2].category))
        .collect::<Vec<_>>()
        .join(" and ")
}

/// Parser rules that cover the generator's vocabulary.
pub fn synthetic_rules() -> ParserRuleSet {
    let mut rules = ParserRuleSet::default();
    rules.nouns = NOUNS.iter().map(|n| n.to_string()).collect();
    for p in PREDICATES {
        let words: Vec<&str> = p.split(' ').collect();
        match words.as_slice() {
            [w] if rules.prepositions.contains(*w) => {}
            [w] if ["to", "from", "inside"].contains(w) => {
                rules.prepositions.insert(w.to_string());
            }
            [w] => {
                rules.verbs.insert(w.to_string());
            }
            [v, prep] => {
                rules.verbs.insert(v.to_string());
                rules.prepositions.insert(prep.to_string());
            }
            _ => unreachable!("predicates have at most two words"),
        }
    }
    rules
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = substream(cfg.seed, GENERATOR);
    let vocab = Vocab {
        seed: cfg.seed,
        cfg: cfg.clone(),
    };
    let categories: Vec<String> = NOUNS
        .choose_multiple(&mut rng, cfg.categories)
        .map(|s| s.to_string())
        .collect();
    let predicates: Vec<String> = PREDICATES
        .choose_multiple(&mut rng, cfg.predicates)
        .map(|s| s.to_string())
        .collect();
    let grid_scale = (cfg.width / cfg.grid as f64, cfg.height / cfg.grid as f64);

    let mut ds = SynthDataset {
        categories: categories.clone(),
        predicates: predicates.clone(),
        images: Vec::new(),
        captions: Vec::new(),
        graphs: Vec::new(),
        embeddings: Vec::new(),
        activations: Vec::new(),
        expert: Vec::new(),
        alignments: Vec::new(),
        test_images: Vec::new(),
        test_gt: Vec::new(),
        rules: synthetic_rules(),
    };

    for i in 0..cfg.images {
        let id = format!("train_{i:04}");
        let sc = scene(cfg, &vocab, &categories, &predicates, &mut rng);
        let text = caption(&sc.entities, &sc.edges);
        ds.graphs.push(UnlocalizedSceneGraph {
            image_id: id.clone(),
            entities: sc
                .entities
                .iter()
                .enumerate()
                .map(|(k, e)| TextEntity::new(k, e.category.clone(), None))
                .collect(),
            edges: sc.edges.clone(),
        });
        ds.captions.push(CaptionRecord {
            image_id: id.clone(),
            caption: text,
        });
        ds.embeddings.push(EmbeddingRecord {
            image_id: id.clone(),
            entity_embeddings: sc
                .entities
                .iter()
                .map(|e| {
                    let mut v = vocab.embedding(&e.category, &e.predicate, e.role);
                    add_noise(&mut v, cfg.embedding_noise, &mut rng);
                    v
                })
                .collect(),
        });
        for (k, e) in sc.entities.iter().enumerate() {
            let target = if sc.proposals.len() > 1 && rng.random_bool(cfg.activation_offset_rate) {
                let wrong: Vec<usize> = (0..sc.proposals.len()).filter(|&j| j != sc.alignment[k]).collect();
                sc.proposals[*wrong.choose(&mut rng).expect("another proposal")].bbox
            } else {
                e.bbox
            };
            ds.activations.push(ActivationMap {
                image_id: id.clone(),
                entity_id: k,
                height: cfg.grid,
                width: cfg.grid,
                scale: grid_scale,
                grid: blob(cfg, &target),
            });
        }
        ds.expert.push(ExpertRecord {
            image_id: id.clone(),
            proposal_embeddings: sc
                .truth
                .iter()
                .map(|c| {
                    let mut v = vocab.expert(c);
                    add_noise(&mut v, cfg.expert_noise, &mut rng);
                    v
                })
                .collect(),
            entity_prompt_embeddings: sc.entities.iter().map(|e| vocab.expert(&e.category)).collect(),
        });
        ds.alignments.push(AlignmentRecord {
            image_id: id.clone(),
            proposals: sc.alignment.clone(),
        });
        ds.images.push(ImageRecord {
            image_id: id,
            width: cfg.width,
            height: cfg.height,
            proposals: sc.proposals,
        });
    }

    for i in 0..cfg.test_images {
        let id = format!("test_{i:04}");
        let sc = scene(cfg, &vocab, &categories, &predicates, &mut rng);
        ds.test_gt.push(GtRecord {
            image_id: id.clone(),
            objects: sc
                .entities
                .iter()
                .map(|e| GtObject {
                    bbox: e.bbox,
                    label: e.category.clone(),
                })
                .collect(),
            relations: sc.edges.iter().map(|e| (e.0, e.1.clone(), e.2)).collect(),
        });
        ds.test_images.push(ImageRecord {
            image_id: id,
            width: cfg.width,
            height: cfg.height,
            proposals: sc.proposals,
        });
    }
    Ok(ds)
}

/// Fraction of entities whose detector label on the true proposal is intact.
pub fn label_accuracy(ds: &SynthDataset) -> f64 {
    let mut hits = 0;
    let mut total = 0;
    for ((img, graph), align) in ds.images.iter().zip(&ds.graphs).zip(&ds.alignments) {
        for (e, &p) in graph.entities.iter().zip(&align.proposals) {
            total += 1;
            if img.proposals[p].label == e.lemma {
                hits += 1;
            }
        }
    }
    hits as f64 / total.max(1) as f64
}

/// Distinct nouns and predicates used by a dataset.
pub fn used_vocabulary(ds: &SynthDataset) -> (BTreeSet<String>, BTreeSet<String>) {
    let nouns = ds.graphs.iter().flat_map(|g| g.entities.iter().map(|e| e.lemma.clone())).collect();
    let preds = ds.graphs.iter().flat_map(|g| g.edges.iter().map(|e| e.1.clone())).collect();
    (nouns, preds)
}
