//! Data model shared by every stage of the pipeline.
//!
//! Records are immutable once built. Entity and embedding indices are
//! positional: entity `i` of a graph owns row `i` of the image's embedding
//! table and activation-map list.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Metric;

/// Axis-aligned box in corner format `(x1, y1, x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Metric> BBox<T> {
    /// Builds a box, rejecting empty or inverted extents.
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if x1 < x2 && y1 < y2 {
            Ok(b)
        } else {
            Err(b.zero_area_error())
        }
    }

    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn has_area(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        let w = self.x2.min_of(other.x2) - self.x1.max_of(other.x1);
        let h = self.y2.min_of(other.y2) - self.y1.max_of(other.y1);
        if w > T::zero() && h > T::zero() {
            w * h
        } else {
            T::zero()
        }
    }

    pub(crate) fn zero_area_error(&self) -> Error {
        let f = |v: T| format!("{v:?}").parse::<f64>().unwrap_or(f64::NAN);
        Error::ZeroAreaBox {
            x1: f(self.x1),
            y1: f(self.y1),
            x2: f(self.x2),
            y2: f(self.y2),
        }
    }
}

impl BBox<f64> {
    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn map<U>(&self, f: impl Fn(f64) -> U) -> BBox<U> {
        BBox {
            x1: f(self.x1),
            y1: f(self.y1),
            x2: f(self.x2),
            y2: f(self.y2),
        }
    }
}

impl<T: Serialize + Copy> Serialize for BBox<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.x1, self.y1, self.x2, self.y2].serialize(s)
    }
}

impl<'de, T: Deserialize<'de> + Copy> Deserialize<'de> for BBox<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[T; 4]>::deserialize(d)?;
        Ok(BBox { x1, y1, x2, y2 })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextEntity {
    pub entity_id: usize,
    pub lemma: String,
    pub caption_span: Option<(usize, usize)>,
    pub embedding_ref: usize,
}

impl TextEntity {
    pub fn new(entity_id: usize, lemma: impl Into<String>, caption_span: Option<(usize, usize)>) -> Self {
        TextEntity {
            entity_id,
            lemma: lemma.into(),
            caption_span,
            embedding_ref: entity_id,
        }
    }
}

/// Directed predicate edge between two entities of the same graph.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge(pub usize, pub String, pub usize);

impl Edge {
    pub fn new(subject: usize, predicate: impl Into<String>, object: usize) -> Self {
        Edge(subject, predicate.into(), object)
    }

    pub fn subject(&self) -> usize {
        self.0
    }

    pub fn predicate(&self) -> &str {
        &self.1
    }

    pub fn object(&self) -> usize {
        self.2
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnlocalizedSceneGraph {
    pub image_id: String,
    pub entities: Vec<TextEntity>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    IndexOutOfRange { edge: usize, index: usize },
    SelfLoop { edge: usize },
    DuplicateEdge { edge: usize },
    BadLemma { entity: usize },
    BadSpan { entity: usize },
    BadEntityId { entity: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::IndexOutOfRange { edge, index } => {
                write!(f, "edge {edge}: index out of range ({index})")
            }
            Violation::SelfLoop { edge } => write!(f, "edge {edge}: self-loop"),
            Violation::DuplicateEdge { edge } => write!(f, "edge {edge}: duplicate edge"),
            Violation::BadLemma { entity } => {
                write!(f, "entity {entity}: lemma must be non-empty lowercase")
            }
            Violation::BadSpan { entity } => write!(f, "entity {entity}: span start must precede end"),
            Violation::BadEntityId { entity } => {
                write!(f, "entity {entity}: entity id must equal its position")
            }
        }
    }
}

/// Lists every structural problem in `graph`; empty iff well-formed.
pub fn validate_graph(graph: &UnlocalizedSceneGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, e) in graph.entities.iter().enumerate() {
        if e.entity_id != i || e.embedding_ref != i {
            out.push(Violation::BadEntityId { entity: i });
        }
        if e.lemma.is_empty() || e.lemma != e.lemma.to_lowercase() {
            out.push(Violation::BadLemma { entity: i });
        }
        if let Some((s, t)) = e.caption_span {
            if s >= t {
                out.push(Violation::BadSpan { entity: i });
            }
        }
    }
    let n = graph.entities.len();
    let mut seen = BTreeSet::new();
    for (k, edge) in graph.edges.iter().enumerate() {
        let mut in_range = true;
        for idx in [edge.subject(), edge.object()] {
            if idx >= n {
                out.push(Violation::IndexOutOfRange { edge: k, index: idx });
                in_range = false;
            }
        }
        if edge.subject() == edge.object() {
            out.push(Violation::SelfLoop { edge: k });
        }
        if in_range && !seen.insert(edge.clone()) {
            out.push(Violation::DuplicateEdge { edge: k });
        }
    }
    out
}

impl UnlocalizedSceneGraph {
    /// Builds a graph with positional entity ids and validates it.
    pub fn from_parts(
        image_id: impl Into<String>,
        entities: Vec<(String, Option<(usize, usize)>)>,
        edges: Vec<Edge>,
    ) -> Result<Self> {
        let graph = UnlocalizedSceneGraph {
            image_id: image_id.into(),
            entities: entities
                .into_iter()
                .enumerate()
                .map(|(i, (lemma, span))| TextEntity::new(i, lemma, span))
                .collect(),
            edges,
        };
        graph.checked()
    }

    pub fn checked(self) -> Result<Self> {
        let violations = validate_graph(&self);
        if violations.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidGraph {
                image_id: self.image_id,
                violations,
            })
        }
    }
}

#[derive(Serialize, Deserialize)]
struct EntityRecord {
    lemma: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    span: Option<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct GraphRecord {
    image_id: String,
    entities: Vec<EntityRecord>,
    #[serde(default)]
    edges: Vec<Edge>,
}

impl Serialize for UnlocalizedSceneGraph {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GraphRecord {
            image_id: self.image_id.clone(),
            entities: self
                .entities
                .iter()
                .map(|e| EntityRecord {
                    lemma: e.lemma.clone(),
                    span: e.caption_span,
                })
                .collect(),
            edges: self.edges.clone(),
        }
        .serialize(s)
    }
}

/// Decoding assigns positional ids but does not validate; callers go through
/// ingestion, which does.
impl<'de> Deserialize<'de> for UnlocalizedSceneGraph {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = GraphRecord::deserialize(d)?;
        Ok(UnlocalizedSceneGraph {
            image_id: rec.image_id,
            entities: rec
                .entities
                .into_iter()
                .enumerate()
                .map(|(i, e)| TextEntity::new(i, e.lemma, e.span))
                .collect(),
            edges: rec.edges,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionProposal {
    #[serde(rename = "box")]
    pub bbox: BBox<f64>,
    pub label: String,
    pub score: f64,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub proposals: Vec<RegionProposal>,
}

impl ImageRecord {
    /// Checks box extents, scores and (optionally) the feature dimension.
    pub fn validate(&self, feature_dim: Option<usize>) -> Result<()> {
        let bad = |reason: String| Error::InvalidRecord {
            image_id: self.image_id.clone(),
            reason,
        };
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(bad("image size must be positive".into()));
        }
        for (j, p) in self.proposals.iter().enumerate() {
            let b = &p.bbox;
            if !b.has_area() {
                return Err(bad(format!("proposal {j}: box has no area")));
            }
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > self.width || b.y2 > self.height {
                return Err(bad(format!("proposal {j}: box outside image")));
            }
            if !(0.0..=1.0).contains(&p.score) {
                return Err(bad(format!("proposal {j}: score {} outside [0, 1]", p.score)));
            }
            if let Some(d) = feature_dim {
                if p.feature.len() != d {
                    return Err(bad(format!(
                        "proposal {j}: feature dimension {} != {d}",
                        p.feature.len()
                    )));
                }
            }
            if p.feature.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("proposal {j}: non-finite feature")));
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.proposals.first().map(|p| p.feature.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    ObjectTeacher,
    InteractionTeacher,
    Fused,
}

/// Per-entity probability vector over an image's proposals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDistribution<T> {
    pub values: Vec<T>,
    pub source: TargetSource,
    pub defined: bool,
}

impl<T: num_traits::Float> TargetDistribution<T> {
    pub fn undefined(len: usize, source: TargetSource) -> Self {
        TargetDistribution {
            values: vec![T::zero(); len],
            source,
            defined: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// True when the vector is a distribution within `tol`, or the all-zero
    /// sentinel when undefined.
    pub fn is_valid(&self, tol: T) -> bool {
        if self.defined {
            let sum = self.values.iter().fold(T::zero(), |a, &b| a + b);
            self.values.iter().all(|v| *v >= T::zero() && v.is_finite()) && (sum - T::one()).abs() <= tol
        } else {
            self.values.iter().all(|v| v.is_zero())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate(pub usize, pub f64);

impl Candidate {
    pub fn proposal(&self) -> usize {
        self.0
    }

    pub fn score(&self) -> f64 {
        self.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedEntity {
    pub lemma: String,
    pub candidates: Vec<Candidate>,
    /// Best-ranked proposal outside `candidates`, if the image has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reserve: Option<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoSceneGraph {
    pub image_id: String,
    #[serde(rename = "entities")]
    pub grounded_entities: Vec<GroundedEntity>,
    pub edges: Vec<Edge>,
}

/// Total order used for candidate lists: score descending, index ascending.
pub fn candidate_order(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

impl PseudoSceneGraph {
    pub fn validate(&self, num_proposals: usize) -> Result<()> {
        let bad = |reason: String| Error::InvalidRecord {
            image_id: self.image_id.clone(),
            reason,
        };
        for (i, e) in self.grounded_entities.iter().enumerate() {
            if e.candidates.is_empty() {
                return Err(bad(format!("entity {i} has no candidates")));
            }
            if e.candidates.iter().chain(e.reserve.iter()).any(|c| c.0 >= num_proposals) {
                return Err(bad(format!("entity {i} references a missing proposal")));
            }
            if e.candidates
                .windows(2)
                .any(|w| candidate_order(&w[0], &w[1]) != std::cmp::Ordering::Less)
            {
                return Err(bad(format!("entity {i} candidates are not in rank order")));
            }
        }
        let n = self.grounded_entities.len();
        if self.edges.iter().any(|e| e.0 >= n || e.2 >= n || e.0 == e.2) {
            return Err(bad("edge references an invalid entity".into()));
        }
        Ok(())
    }
}
