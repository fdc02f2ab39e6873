//! Fusing the object-aware and interaction-aware targets into one
//! distillation target per entity.

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{TargetDistribution, TargetSource};
use crate::nn::Params;
use crate::scalar::{softmax, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    #[default]
    Average,
    Expert,
    #[serde(rename = "self")]
    SelfGuided,
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(FusionStrategy::Average),
            "expert" => Ok(FusionStrategy::Expert),
            "self" => Ok(FusionStrategy::SelfGuided),
            other => Err(Error::Config(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

/// Per-entity teacher weights `(w_o, w_r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherWeights<T> {
    pub object: T,
    pub interaction: T,
}

impl<T: Scalar> TeacherWeights<T> {
    pub fn new(object: T, interaction: T) -> Self {
        TeacherWeights { object, interaction }
    }

    pub fn even() -> Self {
        let half = T::lit(0.5);
        TeacherWeights::new(half, half)
    }

    /// Softmax over the reliability scores of the defined teachers; a
    /// missing teacher gets weight 0.
    pub fn from_scores(object: Option<T>, interaction: Option<T>) -> Result<Self> {
        match (object, interaction) {
            (Some(o), Some(r)) => {
                let w = softmax(&[o, r]);
                Ok(TeacherWeights::new(w[0], w[1]))
            }
            (None, Some(_)) => Ok(TeacherWeights::new(T::zero(), T::one())),
            (Some(_), None) => Ok(TeacherWeights::new(T::one(), T::zero())),
            (None, None) => Err(Error::UndefinedTarget),
        }
    }

    /// The average strategy, with the same fallback as the learned ones.
    pub fn average(object_defined: bool, interaction_defined: bool) -> Result<Self> {
        let score = |d: bool| d.then(T::zero);
        Self::from_scores(score(object_defined), score(interaction_defined))
    }
}

/// `ṽ = Vᵀ a`: the target-weighted combination of proposal rows.
pub fn attended_feature<T: Scalar>(target: &TargetDistribution<T>, v: ArrayView2<T>) -> Result<Array1<T>> {
    if !target.defined {
        return Err(Error::UndefinedTarget);
    }
    attend(&target.values, v)
}

pub(crate) fn attend<T: Scalar>(weights: &[T], v: ArrayView2<T>) -> Result<Array1<T>> {
    if weights.len() != v.nrows() {
        return Err(Error::Dimension {
            context: "attention weights",
            expected: v.nrows(),
            actual: weights.len(),
        });
    }
    Ok(v.t().dot(&ArrayView1::from(weights)))
}

/// `q = w_o · a_o + w_r · a_r`.
pub fn fuse_targets<T: Scalar>(
    object: &TargetDistribution<T>,
    interaction: &TargetDistribution<T>,
    weights: TeacherWeights<T>,
) -> Result<TargetDistribution<T>> {
    let (wo, wr) = (weights.object, weights.interaction);
    let tol = T::lit(1e-9);
    let invalid = || Error::InvalidWeights(wo.to_f64_lossy(), wr.to_f64_lossy());
    if wo < T::zero() || wr < T::zero() || ((wo + wr) - T::one()).abs() > tol || !(wo + wr).is_finite() {
        return Err(invalid());
    }
    if (!object.defined && wo > T::zero()) || (!interaction.defined && wr > T::zero()) {
        return Err(invalid());
    }
    if object.len() != interaction.len() {
        return Err(Error::Dimension {
            context: "fused targets",
            expected: object.len(),
            actual: interaction.len(),
        });
    }
    let values = object
        .values
        .iter()
        .zip(&interaction.values)
        .map(|(&o, &r)| wo * o + wr * r)
        .collect();
    Ok(TargetDistribution {
        values,
        source: TargetSource::Fused,
        defined: object.defined || interaction.defined,
    })
}

/// Embeddings from an image-text matching model for one image-caption pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertEmbeddings<T> {
    /// One row per proposal crop.
    pub proposals: ndarray::Array2<T>,
    /// One row per entity prompt ("a photo of a {lemma}").
    pub prompts: ndarray::Array2<T>,
}

/// Source of expert embeddings, keyed by image and entity.
pub trait ExpertEmbedder<T> {
    fn embeddings(&self, image_id: &str) -> Result<&ExpertEmbeddings<T>>;
}

pub fn prompt_for(lemma: &str) -> String {
    format!("a photo of a {lemma}")
}

fn cosine<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>, what: &str) -> Result<T> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na <= T::zero() || nb <= T::zero() || !(na.is_finite() && nb.is_finite()) {
        return Err(Error::ZeroNorm(what.to_string()));
    }
    Ok(a.dot(&b) / (na * nb))
}

/// Expert-guided weights: cosine between each defined teacher's attended
/// expert feature and the entity's prompt embedding, then softmax.
pub fn expert_reweight<T: Scalar>(
    entity_id: usize,
    object: &TargetDistribution<T>,
    interaction: &TargetDistribution<T>,
    expert: &ExpertEmbeddings<T>,
) -> Result<TeacherWeights<T>> {
    if entity_id >= expert.prompts.nrows() {
        return Err(Error::ProviderMiss {
            what: "expert prompt embedding",
            key: format!("entity {entity_id}"),
        });
    }
    let prompt = expert.prompts.row(entity_id);
    let score = |t: &TargetDistribution<T>, name: &str| -> Result<Option<T>> {
        if !t.defined {
            return Ok(None);
        }
        let att = attend(&t.values, expert.proposals.view())?;
        cosine(att.view(), prompt, name).map(Some)
    };
    if !object.defined && !interaction.defined {
        return Err(Error::UndefinedTarget);
    }
    TeacherWeights::from_scores(
        score(object, "object-attended expert feature")?,
        score(interaction, "interaction-attended expert feature")?,
    )
}

/// Learned reliability scorer `FC_adp([ṽ; h]) -> R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AdaptorParams<T> {
    pub weight: Array1<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> AdaptorParams<T> {
    pub fn init<R: Rng>(embed_dim: usize, rng: &mut R) -> Self {
        let lin = crate::nn::Linear::<T>::init(2 * embed_dim, 1, rng);
        AdaptorParams {
            weight: lin.weight.row(0).to_owned(),
            bias: lin.bias,
        }
    }

    pub fn zeros(embed_dim: usize) -> Self {
        AdaptorParams {
            weight: Array1::zeros(2 * embed_dim),
            bias: Array1::zeros(1),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.len() / 2
    }

    /// Score of an (attended feature, entity encoding) pair. Both inputs are
    /// plain values here, so no gradient can reach the encoders through them.
    pub fn score(&self, attended: ArrayView1<T>, entity: ArrayView1<T>) -> Result<T> {
        let d = self.embed_dim();
        for (len, context) in [(attended.len(), "adaptor attended input"), (entity.len(), "adaptor entity input")] {
            if len != d {
                return Err(Error::Dimension {
                    context,
                    expected: d,
                    actual: len,
                });
            }
        }
        let w = self.weight.view();
        Ok(w.slice(ndarray::s![..d]).dot(&attended) + w.slice(ndarray::s![d..]).dot(&entity) + self.bias[0])
    }

    /// Accumulates `scale * d score / d params` into `grad`.
    pub fn accumulate_grad(&self, attended: ArrayView1<T>, entity: ArrayView1<T>, scale: T, grad: &mut AdaptorParams<T>) {
        let d = self.embed_dim();
        grad.weight
            .slice_mut(ndarray::s![..d])
            .scaled_add(scale, &attended);
        grad.weight.slice_mut(ndarray::s![d..]).scaled_add(scale, &entity);
        grad.bias[0] += scale;
    }
}

impl<T: Scalar> Params<T> for AdaptorParams<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![
            self.weight.as_slice().expect("contiguous"),
            self.bias.as_slice().expect("contiguous"),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.weight.as_slice_mut().expect("contiguous"),
            self.bias.as_slice_mut().expect("contiguous"),
        ]
    }
}

/// Per-entity outcome of [`self_reweight`], kept for the adaptor loss.
#[derive(Debug, Clone)]
pub struct SelfReweight<T> {
    pub weights: TeacherWeights<T>,
    pub object_attended: Option<Array1<T>>,
    pub interaction_attended: Option<Array1<T>>,
    pub object_score: Option<T>,
    pub interaction_score: Option<T>,
}

/// Self-guided weights from the adaptor, fed with the student's own encoded
/// proposals `v` and entity row `h`.
pub fn self_reweight<T: Scalar>(
    object: &TargetDistribution<T>,
    interaction: &TargetDistribution<T>,
    h: ArrayView1<T>,
    v: ArrayView2<T>,
    adaptor: &AdaptorParams<T>,
) -> Result<SelfReweight<T>> {
    let attended = |t: &TargetDistribution<T>| -> Result<Option<Array1<T>>> {
        if t.defined {
            attend(&t.values, v).map(Some)
        } else {
            Ok(None)
        }
    };
    let object_attended = attended(object)?;
    let interaction_attended = attended(interaction)?;
    let score = |a: &Option<Array1<T>>| -> Result<Option<T>> {
        a.as_ref().map(|a| adaptor.score(a.view(), h)).transpose()
    };
    let object_score = score(&object_attended)?;
    let interaction_score = score(&interaction_attended)?;
    Ok(SelfReweight {
        weights: TeacherWeights::from_scores(object_score, interaction_score)?,
        object_attended,
        interaction_attended,
        object_score,
        interaction_score,
    })
}

/// `Σ max(0, neg − pos + margin)` over the given (positive, negative) pairs.
pub fn adaptor_loss<T: Scalar>(pairs: &[(T, T)], margin: T) -> T {
    pairs
        .iter()
        .map(|&(pos, neg)| (neg - pos + margin).max(T::zero()))
        .sum()
}

/// Weights of a randomly attended feature: a draw from the flat Dirichlet
/// over `n` proposals.
pub fn random_attention<T: Scalar, R: Rng>(n: usize, rng: &mut R) -> Vec<T> {
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect::<Vec<f64>>();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| T::lit(x / total)).collect()
}
