//! The combined grounding objective `L_GD = L_MIL + L_KD + λ L_adp` on one
//! mini-batch, with gradients for the grounder and the adaptor.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{adaptor_loss, attend, fuse_targets, self_reweight, AdaptorParams, FusionStrategy, TeacherWeights};
use crate::grounder::GrounderParams;
use crate::ir::TargetDistribution;
use crate::scalar::Scalar;

use super::dataset::GroundingSample;
use super::losses::{caption_image_score, caption_image_score_grad, kd_loss, kd_loss_grad};
use super::{TeacherSet, TrainConfig};

/// Detached per-entity inputs of the adaptor loss.
#[derive(Debug, Clone)]
pub struct AdaptorTerm<T> {
    pub entity: Array1<T>,
    /// Attended features of each defined teacher.
    pub positives: Vec<Array1<T>>,
    /// A randomly attended feature.
    pub negative: Array1<T>,
}

/// Distillation targets and adaptor inputs for one sample. Everything here is
/// treated as constant by [`batch_objective`].
#[derive(Debug, Clone)]
pub struct SamplePlan<T> {
    pub targets: Vec<Option<TargetDistribution<T>>>,
    pub weights: Vec<Option<TeacherWeights<T>>>,
    pub adaptor_terms: Vec<AdaptorTerm<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub mil: T,
    pub kd: T,
    pub adaptor: T,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn is_finite(&self) -> bool {
        [self.mil, self.kd, self.adaptor, self.total].iter().all(|v| v.is_finite())
    }

    pub fn accumulate(&mut self, other: &Self) {
        self.mil += other.mil;
        self.kd += other.kd;
        self.adaptor += other.adaptor;
        self.total += other.total;
    }
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub grounder: GrounderParams<T>,
    pub adaptor: AdaptorParams<T>,
}

/// Resolves the distillation target of every entity in `batch`.
///
/// `negatives[b][i]` holds the random attention weights for entity `i` of
/// sample `b`; only the self-guided strategy reads them.
pub fn plan_batch<T: Scalar>(
    params: &GrounderParams<T>,
    adaptor: &AdaptorParams<T>,
    batch: &[&GroundingSample<T>],
    cfg: &TrainConfig,
    negatives: &[Vec<Vec<T>>],
) -> Result<Vec<SamplePlan<T>>> {
    batch
        .iter()
        .enumerate()
        .map(|(b, s)| plan_sample(params, adaptor, s, cfg, negatives.get(b)))
        .collect()
}

fn plan_sample<T: Scalar>(
    params: &GrounderParams<T>,
    adaptor: &AdaptorParams<T>,
    sample: &GroundingSample<T>,
    cfg: &TrainConfig,
    negatives: Option<&Vec<Vec<T>>>,
) -> Result<SamplePlan<T>> {
    let n = sample.num_entities();
    let inter = |i: usize| -> Result<&TargetDistribution<T>> {
        sample
            .interaction_targets
            .as_ref()
            .map(|t| &t[i])
            .ok_or_else(|| Error::ProviderMiss {
                what: "interaction targets",
                key: sample.image_id.clone(),
            })
    };
    let mut plan = SamplePlan {
        targets: Vec::with_capacity(n),
        weights: Vec::with_capacity(n),
        adaptor_terms: Vec::new(),
    };
    match cfg.teachers {
        TeacherSet::None => {
            plan.targets.resize(n, None);
            plan.weights.resize(n, None);
        }
        TeacherSet::Object => {
            for t in &sample.object_targets {
                plan.targets.push(t.defined.then(|| t.clone()));
                plan.weights.push(None);
            }
        }
        TeacherSet::Interaction => {
            for i in 0..n {
                plan.targets.push(Some(inter(i)?.clone()));
                plan.weights.push(None);
            }
        }
        TeacherSet::Both => {
            let encoded = if cfg.strategy == FusionStrategy::SelfGuided {
                let h = params.encode_text(sample.embeddings.view())?;
                let v = params.encode_visual(sample.features.view())?;
                Some((h, v))
            } else {
                None
            };
            for i in 0..n {
                let object = &sample.object_targets[i];
                let interaction = inter(i)?;
                let weights = match cfg.strategy {
                    FusionStrategy::Average => TeacherWeights::average(object.defined, interaction.defined)?,
                    FusionStrategy::Expert => sample
                        .expert_weights
                        .as_ref()
                        .map(|w| w[i])
                        .ok_or_else(|| Error::ProviderMiss {
                            what: "expert embeddings",
                            key: sample.image_id.clone(),
                        })?,
                    FusionStrategy::SelfGuided => {
                        let (h, v) = encoded.as_ref().expect("encoded above");
                        let r = self_reweight(object, interaction, h.row(i), v.view(), adaptor)?;
                        let neg_weights = negatives.and_then(|n| n.get(i)).ok_or_else(|| Error::ProviderMiss {
                            what: "adaptor negative sample",
                            key: format!("{} entity {i}", sample.image_id),
                        })?;
                        plan.adaptor_terms.push(AdaptorTerm {
                            entity: h.row(i).to_owned(),
                            positives: r
                                .object_attended
                                .iter()
                                .chain(r.interaction_attended.iter())
                                .cloned()
                                .collect(),
                            negative: attend(neg_weights, v.view())?,
                        });
                        r.weights
                    }
                };
                plan.targets.push(Some(fuse_targets(object, interaction, weights)?));
                plan.weights.push(Some(weights));
            }
        }
    }
    Ok(plan)
}

/// Evaluates `L_GD` on `batch` against fixed `plans`, returning the loss
/// components and gradients. The adaptor term is scaled by `cfg.lambda()`
/// and only ever reaches the adaptor's gradient.
pub fn batch_objective<T: Scalar>(
    params: &GrounderParams<T>,
    adaptor: &AdaptorParams<T>,
    batch: &[&GroundingSample<T>],
    plans: &[SamplePlan<T>],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown<T>, Gradients<T>)> {
    let n = batch.len();
    let mut grads = Gradients {
        grounder: params.zeros_like(),
        adaptor: AdaptorParams::zeros(adaptor.embed_dim()),
    };
    let mut loss = LossBreakdown::default();

    let mut text = Vec::with_capacity(n);
    let mut visual = Vec::with_capacity(n);
    for s in batch {
        text.push(params.encode_text_cached(s.embeddings.view())?);
        visual.push(params.encode_visual_cached(s.features.view())?);
    }
    let mut dh: Vec<Array2<T>> = text.iter().map(|(h, _)| Array2::zeros(h.dim())).collect();
    let mut dv: Vec<Array2<T>> = visual.iter().map(|(v, _)| Array2::zeros(v.dim())).collect();

    // similarity of caption c against image k
    let mut sims: Vec<Vec<Option<Array2<T>>>> = vec![vec![None; n]; n];
    let needs_mil = n >= 2 && cfg.use_mil;
    for c in 0..n {
        for k in 0..n {
            if k == c || needs_mil {
                sims[c][k] = Some(params.similarity_matrix(text[c].0.view(), visual[k].0.view())?);
            }
        }
    }
    let mut d_sims: Vec<Vec<Option<Array2<T>>>> = vec![vec![None; n]; n];

    if needs_mil {
        let margin = T::lit(cfg.mil_margin);
        let scores: Vec<Vec<T>> = (0..n)
            .map(|c| {
                (0..n)
                    .map(|k| caption_image_score(sims[c][k].as_ref().expect("computed").view()))
                    .collect::<Result<Vec<T>>>()
            })
            .collect::<Result<_>>()?;
        let mut d_scores = vec![vec![T::zero(); n]; n];
        for c in 0..n {
            for k in (0..n).filter(|&k| k != c) {
                let hinge = scores[c][k] - scores[c][c] + margin;
                if hinge > T::zero() {
                    loss.mil += hinge;
                    d_scores[c][k] += T::one();
                    d_scores[c][c] -= T::one();
                }
            }
        }
        for c in 0..n {
            for k in 0..n {
                if d_scores[c][k] != T::zero() {
                    let a = sims[c][k].as_ref().expect("computed");
                    d_sims[c][k] = Some(caption_image_score_grad(a.view(), d_scores[c][k]));
                }
            }
        }
    }

    for c in 0..n {
        let a = sims[c][c].as_ref().expect("computed");
        let targets = &plans[c].targets;
        if targets.iter().any(Option::is_some) {
            loss.kd += kd_loss(targets, a.view())?;
            let g = kd_loss_grad(targets, a.view());
            d_sims[c][c] = Some(match d_sims[c][c].take() {
                Some(prev) => prev + g,
                None => g,
            });
        }
    }

    for c in 0..n {
        for k in 0..n {
            if let Some(da) = &d_sims[c][k] {
                let (gh, gv) = params.similarity_backward(text[c].0.view(), visual[k].0.view(), da.view(), &mut grads.grounder);
                dh[c] += &gh;
                dv[k] += &gv;
            }
        }
    }

    let lambda = T::lit(cfg.lambda());
    let margin = T::lit(cfg.adaptor_margin);
    for plan in plans {
        for term in &plan.adaptor_terms {
            let neg = adaptor.score(term.negative.view(), term.entity.view())?;
            for pos_feat in &term.positives {
                let pos = adaptor.score(pos_feat.view(), term.entity.view())?;
                let l = adaptor_loss(&[(pos, neg)], margin);
                if l > T::zero() {
                    loss.adaptor += l;
                    if lambda != T::zero() {
                        adaptor.accumulate_grad(term.negative.view(), term.entity.view(), lambda, &mut grads.adaptor);
                        adaptor.accumulate_grad(pos_feat.view(), term.entity.view(), -lambda, &mut grads.adaptor);
                    }
                }
            }
        }
    }

    for c in 0..n {
        params.text.backward(&text[c].1, dh[c].view(), &mut grads.grounder.text);
        params.visual.backward(&visual[c].1, dv[c].view(), &mut grads.grounder.visual);
    }

    loss.total = loss.mil + loss.kd + lambda * loss.adaptor;
    Ok((loss, grads))
}
