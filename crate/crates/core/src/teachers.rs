//! Target distributions from the two external knowledge sources: detector
//! category labels (object-aware) and per-entity activation maps
//! (interaction-aware).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{BBox, ImageRecord, TargetDistribution, TargetSource, TextEntity};
use crate::parsing::canonicalize;
use crate::scalar::{softmax, Scalar};

/// Relevance of each image location to one entity, on a coarse grid.
///
/// Grid cell `(r, c)` covers image pixels `[c*sx, (c+1)*sx) x [r*sy, (r+1)*sy)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub image_id: String,
    pub entity_id: usize,
    pub height: usize,
    pub width: usize,
    /// Image pixels per grid cell, `(sx, sy)`.
    pub scale: (f64, f64),
    /// Row-major, `height * width` nonnegative values.
    pub grid: Vec<f64>,
}

/// Header fields for the bulk binary layout; the grid lives in the stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationMeta {
    pub image_id: String,
    pub entity_id: usize,
    pub height: usize,
    pub width: usize,
    pub scale: (f64, f64),
}

impl ActivationMap {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Error::InvalidRecord {
            image_id: format!("{} entity {}", self.image_id, self.entity_id),
            reason: reason.to_string(),
        };
        if self.height == 0 || self.width == 0 {
            return Err(bad("activation grid must be at least 1x1"));
        }
        if self.grid.len() != self.height * self.width {
            return Err(bad("activation grid length does not match its shape"));
        }
        if !(self.scale.0 > 0.0 && self.scale.1 > 0.0) {
            return Err(bad("activation scale factors must be positive"));
        }
        if self.grid.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(bad("activation cells must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn meta(&self) -> ActivationMeta {
        ActivationMeta {
            image_id: self.image_id.clone(),
            entity_id: self.entity_id,
            height: self.height,
            width: self.width,
            scale: self.scale,
        }
    }

    pub fn from_parts(meta: ActivationMeta, grid: Vec<f64>) -> Result<Self> {
        let map = ActivationMap {
            image_id: meta.image_id,
            entity_id: meta.entity_id,
            height: meta.height,
            width: meta.width,
            scale: meta.scale,
            grid,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn cell(&self, row: usize, col: usize) -> f64 {
        self.grid[row * self.width + col]
    }
}

/// Activation density of a box: the summed activation of grid cells whose
/// centers lie inside the box, divided by the square root of the box area,
/// both measured in grid-cell units.
pub fn activation_density(map: &ActivationMap, bbox: &BBox<f64>) -> Result<f64> {
    if !bbox.has_area() {
        return Err(bbox.zero_area_error());
    }
    let (sx, sy) = map.scale;
    let (gx1, gx2) = (bbox.x1 / sx, bbox.x2 / sx);
    let (gy1, gy2) = (bbox.y1 / sy, bbox.y2 / sy);
    // cell c has center c + 0.5; inside iff gx1 <= c + 0.5 < gx2
    let col_range = center_range(gx1, gx2, map.width);
    let row_range = center_range(gy1, gy2, map.height);
    let mut total = 0.0;
    for r in row_range {
        for c in col_range.clone() {
            total += map.cell(r, c);
        }
    }
    let area_cells = (gx2 - gx1) * (gy2 - gy1);
    Ok(total / area_cells.sqrt())
}

fn center_range(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    let start = (lo - 0.5).ceil().max(0.0);
    let end = (hi - 0.5).ceil().max(0.0);
    let start = (start as usize).min(n);
    let end = (end as usize).min(n);
    start..end.max(start)
}

/// Case-folded exact matching after synonym canonicalization.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynonymMatcher {
    pub synonyms: BTreeMap<String, String>,
}

impl SynonymMatcher {
    pub fn new(synonyms: BTreeMap<String, String>) -> Self {
        SynonymMatcher { synonyms }
    }

    pub fn canonical(&self, word: &str) -> String {
        canonicalize(&self.synonyms, word.trim())
    }

    pub fn matches(&self, entity: &str, label: &str) -> bool {
        self.canonical(entity) == self.canonical(label)
    }
}

/// Uniform mass over proposals whose detector label matches the entity;
/// undefined (all zero) when none does.
pub fn object_aware_target<T: Scalar>(
    entity: &TextEntity,
    image: &ImageRecord,
    matcher: &SynonymMatcher,
) -> TargetDistribution<T> {
    let lemma = matcher.canonical(&entity.lemma);
    let hits: Vec<bool> = image
        .proposals
        .iter()
        .map(|p| matcher.canonical(&p.label) == lemma)
        .collect();
    let count = hits.iter().filter(|&&h| h).count();
    if count == 0 {
        return TargetDistribution::undefined(hits.len(), TargetSource::ObjectTeacher);
    }
    let mass = T::one() / T::lit(count as f64);
    TargetDistribution {
        values: hits.into_iter().map(|h| if h { mass } else { T::zero() }).collect(),
        source: TargetSource::ObjectTeacher,
        defined: true,
    }
}

/// Softmax (at `temperature`) over per-proposal activation densities.
pub fn interaction_aware_target<T: Scalar>(
    entity: &TextEntity,
    image: &ImageRecord,
    map: &ActivationMap,
    temperature: f64,
) -> Result<TargetDistribution<T>> {
    if map.image_id != image.image_id || map.entity_id != entity.entity_id {
        return Err(Error::InvalidRecord {
            image_id: image.image_id.clone(),
            reason: format!(
                "activation map for ({}, {}) used with entity {}",
                map.image_id, map.entity_id, entity.entity_id
            ),
        });
    }
    let densities = image
        .proposals
        .iter()
        .map(|p| activation_density(map, &p.bbox).map(|g| T::lit(g / temperature)))
        .collect::<Result<Vec<T>>>()?;
    Ok(interaction_target_from_densities(&densities))
}

pub fn interaction_target_from_densities<T: Scalar>(densities: &[T]) -> TargetDistribution<T> {
    TargetDistribution {
        values: softmax(densities),
        source: TargetSource::InteractionTeacher,
        defined: !densities.is_empty(),
    }
}
