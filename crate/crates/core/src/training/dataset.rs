//! Joins images, graphs and provider outputs into per-pair training samples.

use std::collections::BTreeMap;

use log::warn;
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::fusion::{expert_reweight, ExpertEmbeddings, TeacherWeights};
use crate::grounder::rows_to_matrix;
use crate::io::{EmbeddingRecord, ExpertRecord};
use crate::ir::{ImageRecord, TargetDistribution, TargetSource, UnlocalizedSceneGraph};
use crate::scalar::Scalar;
use crate::teachers::{interaction_aware_target, object_aware_target, ActivationMap, SynonymMatcher};

/// One image-caption pair ready for the grounder.
#[derive(Debug, Clone)]
pub struct GroundingSample<T> {
    pub image_id: String,
    pub lemmas: Vec<String>,
    /// `N_v x D_v` proposal features.
    pub features: Array2<T>,
    /// `N_e x D_e` entity embeddings.
    pub embeddings: Array2<T>,
    pub object_targets: Vec<TargetDistribution<T>>,
    /// Absent when the interaction teacher is not in use.
    pub interaction_targets: Option<Vec<TargetDistribution<T>>>,
    /// Precomputed expert-guided weights, when an expert cache was supplied.
    pub expert_weights: Option<Vec<TeacherWeights<T>>>,
}

impl<T> GroundingSample<T> {
    pub fn num_entities(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn num_proposals(&self) -> usize {
        self.features.nrows()
    }
}

/// Everything the grounding stage reads, by reference.
#[derive(Debug, Clone, Copy)]
pub struct GroundingInputs<'a> {
    pub images: &'a [ImageRecord],
    pub graphs: &'a [UnlocalizedSceneGraph],
    pub embeddings: &'a [EmbeddingRecord],
    /// Required when the interaction teacher is used.
    pub activations: Option<&'a [ActivationMap]>,
    /// Required for expert-guided fusion.
    pub expert: Option<&'a [ExpertRecord]>,
    pub matcher: &'a SynonymMatcher,
    pub temperature: f64,
}

/// Builds samples in graph order. Graphs without entities are skipped with a
/// warning; any missing provider output is an error naming the record.
pub fn build_dataset<T: Scalar>(inputs: GroundingInputs<'_>) -> Result<Vec<GroundingSample<T>>> {
    let images: BTreeMap<&str, &ImageRecord> = inputs.images.iter().map(|i| (i.image_id.as_str(), i)).collect();
    let embeddings: BTreeMap<&str, &EmbeddingRecord> =
        inputs.embeddings.iter().map(|e| (e.image_id.as_str(), e)).collect();
    let maps: Option<BTreeMap<(&str, usize), &ActivationMap>> = inputs
        .activations
        .map(|all| all.iter().map(|m| ((m.image_id.as_str(), m.entity_id), m)).collect());
    let expert: Option<BTreeMap<&str, &ExpertRecord>> = inputs
        .expert
        .map(|all| all.iter().map(|e| (e.image_id.as_str(), e)).collect());

    let mut samples = Vec::with_capacity(inputs.graphs.len());
    for graph in inputs.graphs {
        if graph.entities.is_empty() {
            warn!("skipping {}: graph has no entities", graph.image_id);
            continue;
        }
        let id = graph.image_id.as_str();
        let image = *images.get(id).ok_or_else(|| miss("image record", id))?;
        if image.proposals.is_empty() {
            return Err(Error::InvalidRecord {
                image_id: id.to_string(),
                reason: "image has no proposals".into(),
            });
        }
        let visual_dim = image.feature_dim().unwrap_or(0);
        image.validate(Some(visual_dim))?;
        let rows: Vec<Vec<f64>> = image.proposals.iter().map(|p| p.feature.clone()).collect();
        let features = rows_to_matrix(&rows, visual_dim, "proposal features")?;

        let emb = *embeddings.get(id).ok_or_else(|| miss("entity embeddings", id))?;
        if emb.entity_embeddings.len() != graph.entities.len() {
            return Err(Error::ProviderMiss {
                what: "entity embedding rows",
                key: format!("{id} ({} rows for {} entities)", emb.entity_embeddings.len(), graph.entities.len()),
            });
        }
        let text_dim = emb.entity_embeddings.first().map_or(0, |r| r.len());
        let embeddings = rows_to_matrix(&emb.entity_embeddings, text_dim, "entity embeddings")?;

        let object_targets: Vec<TargetDistribution<T>> = graph
            .entities
            .iter()
            .map(|e| object_aware_target(e, image, inputs.matcher))
            .collect();

        let interaction_targets = match &maps {
            None => None,
            Some(maps) => Some(
                graph
                    .entities
                    .iter()
                    .map(|e| {
                        let map = maps
                            .get(&(id, e.entity_id))
                            .ok_or_else(|| miss("activation map", &format!("{id} entity {}", e.entity_id)))?;
                        interaction_aware_target(e, image, map, inputs.temperature)
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };

        let expert_weights = match &expert {
            None => None,
            Some(cache) => {
                let rec = *cache.get(id).ok_or_else(|| miss("expert embeddings", id))?;
                let ex = expert_embeddings(rec, image.proposals.len(), graph.entities.len())?;
                let undefined_interaction;
                let inter: &[TargetDistribution<T>] = match &interaction_targets {
                    Some(t) => t,
                    None => {
                        undefined_interaction =
                            vec![TargetDistribution::undefined(image.proposals.len(), TargetSource::InteractionTeacher); graph.entities.len()];
                        &undefined_interaction
                    }
                };
                Some(
                    object_targets
                        .iter()
                        .zip(inter)
                        .enumerate()
                        .map(|(i, (o, r))| {
                            if !o.defined && !r.defined {
                                Ok(TeacherWeights::new(T::zero(), T::zero()))
                            } else {
                                expert_reweight(i, o, r, &ex)
                            }
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            }
        };

        samples.push(GroundingSample {
            image_id: id.to_string(),
            lemmas: graph.entities.iter().map(|e| e.lemma.clone()).collect(),
            features,
            embeddings,
            object_targets,
            interaction_targets,
            expert_weights,
        });
    }
    Ok(samples)
}

pub fn expert_embeddings<T: Scalar>(rec: &ExpertRecord, proposals: usize, entities: usize) -> Result<ExpertEmbeddings<T>> {
    if rec.proposal_embeddings.len() != proposals || rec.entity_prompt_embeddings.len() != entities {
        return Err(Error::ProviderMiss {
            what: "expert embedding rows",
            key: rec.image_id.clone(),
        });
    }
    let width = rec.proposal_embeddings.first().map_or(0, |r| r.len());
    Ok(ExpertEmbeddings {
        proposals: rows_to_matrix(&rec.proposal_embeddings, width, "expert proposal embeddings")?,
        prompts: rows_to_matrix(&rec.entity_prompt_embeddings, width, "expert prompt embeddings")?,
    })
}

fn miss(what: &'static str, key: &str) -> Error {
    Error::ProviderMiss {
        what,
        key: key.to_string(),
    }
}
