//! Pseudo ground truth: each entity keeps its top-K proposals by grounder
//! similarity.

use std::collections::BTreeMap;

use log::warn;

use crate::error::{Error, Result};
use crate::grounder::{rows_to_matrix, GrounderParams};
use crate::io::EmbeddingRecord;
use crate::ir::{candidate_order, Candidate, GroundedEntity, ImageRecord, PseudoSceneGraph, UnlocalizedSceneGraph};
use crate::scalar::Scalar;

/// Ranks one similarity row and splits it into the top `k` and the next
/// proposal in line.
pub fn rank_candidates(scores: &[f64], k: usize) -> (Vec<Candidate>, Option<Candidate>) {
    let mut ranked: Vec<Candidate> = scores.iter().enumerate().map(|(j, &s)| Candidate(j, s)).collect();
    ranked.sort_by(candidate_order);
    let reserve = ranked.get(k).copied();
    ranked.truncate(k);
    (ranked, reserve)
}

/// Pseudo scene graphs in graph order. Images with no proposals and graphs
/// with no entities are skipped with a warning.
pub fn generate_pseudo_gt<T: Scalar>(
    params: &GrounderParams<T>,
    images: &[ImageRecord],
    graphs: &[UnlocalizedSceneGraph],
    embeddings: &[EmbeddingRecord],
    k: usize,
) -> Result<Vec<PseudoSceneGraph>> {
    if k == 0 {
        return Err(Error::Config("top-k must be at least 1".into()));
    }
    let images: BTreeMap<&str, &ImageRecord> = images.iter().map(|i| (i.image_id.as_str(), i)).collect();
    let embeddings: BTreeMap<&str, &EmbeddingRecord> = embeddings.iter().map(|e| (e.image_id.as_str(), e)).collect();
    let mut out = Vec::with_capacity(graphs.len());
    for graph in graphs {
        let id = graph.image_id.as_str();
        let image = *images.get(id).ok_or_else(|| Error::ProviderMiss {
            what: "image record",
            key: id.to_string(),
        })?;
        if image.proposals.is_empty() {
            warn!("skipping {id}: image has no proposals");
            continue;
        }
        if graph.entities.is_empty() {
            warn!("skipping {id}: graph has no entities");
            continue;
        }
        let emb = *embeddings.get(id).ok_or_else(|| Error::ProviderMiss {
            what: "entity embeddings",
            key: id.to_string(),
        })?;
        if emb.entity_embeddings.len() != graph.entities.len() {
            return Err(Error::ProviderMiss {
                what: "entity embedding rows",
                key: id.to_string(),
            });
        }
        let rows: Vec<Vec<f64>> = image.proposals.iter().map(|p| p.feature.clone()).collect();
        let features = rows_to_matrix::<T>(&rows, params.shape.visual_dim, "proposal features")?;
        let text = rows_to_matrix::<T>(&emb.entity_embeddings, params.shape.text_dim, "entity embeddings")?;
        let h = params.encode_text(text.view())?;
        let v = params.encode_visual(features.view())?;
        let a = params.similarity_matrix(h.view(), v.view())?;
        let grounded_entities = graph
            .entities
            .iter()
            .zip(a.rows())
            .map(|(e, row)| {
                let scores: Vec<f64> = row.iter().map(|x| x.to_f64_lossy()).collect();
                let (candidates, reserve) = rank_candidates(&scores, k);
                GroundedEntity {
                    lemma: e.lemma.clone(),
                    candidates,
                    reserve,
                }
            })
            .collect();
        out.push(PseudoSceneGraph {
            image_id: id.to_string(),
            grounded_entities,
            edges: graph.edges.clone(),
        });
    }
    Ok(out)
}
