//! Grounder optimization: MIL, distillation and adaptor objectives, and the
//! mini-batch training loop.

pub mod dataset;
pub mod losses;
pub mod objective;

use std::collections::BTreeMap;
use std::path::Path;

use log::debug;
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{random_attention, AdaptorParams, FusionStrategy};
use crate::grounder::{GrounderParams, GrounderShape};
use crate::nn::{Activation, Adam, AdamConfig, Params};
use crate::rng::{substream, substream_seed, INIT, SAMPLER, TRAINER};
use crate::scalar::{argmax, Scalar};

pub use dataset::{build_dataset, GroundingInputs, GroundingSample};
pub use losses::{caption_image_score, kd_loss, kl_divergence, mil_loss};
pub use objective::{batch_objective, plan_batch, Gradients, LossBreakdown, SamplePlan};

/// Which teachers supply distillation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TeacherSet {
    None,
    Object,
    Interaction,
    #[default]
    Both,
}

impl std::str::FromStr for TeacherSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TeacherSet::None),
            "object" => Ok(TeacherSet::Object),
            "interaction" => Ok(TeacherSet::Interaction),
            "both" => Ok(TeacherSet::Both),
            other => Err(Error::Config(format!("unknown teacher set {other:?}"))),
        }
    }
}

impl TeacherSet {
    pub fn uses_interaction(self) -> bool {
        matches!(self, TeacherSet::Interaction | TeacherSet::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mil_margin: f64,
    pub adaptor_margin: f64,
    /// Weight of the adaptor loss; derived from the strategy when unset.
    pub lambda: Option<f64>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub top_k: usize,
    pub strategy: FusionStrategy,
    pub teachers: TeacherSet,
    pub use_mil: bool,
    /// Softmax temperature for the interaction-aware target.
    pub temperature: f64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mil_margin: 0.2,
            adaptor_margin: 0.2,
            lambda: None,
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            top_k: 3,
            strategy: FusionStrategy::Average,
            teachers: TeacherSet::Both,
            use_mil: true,
            temperature: 1.0,
            hidden_dim: 512,
            embed_dim: 512,
        }
    }
}

impl TrainConfig {
    fn self_guided(&self) -> bool {
        self.strategy == FusionStrategy::SelfGuided && self.teachers == TeacherSet::Both
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(if self.self_guided() { 1.0 } else { 0.0 })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.mil_margin > 0.0 && self.adaptor_margin > 0.0) {
            return bad("margins must be positive");
        }
        if let Some(l) = self.lambda {
            if l != 0.0 && l != 1.0 {
                return bad("lambda must be 0 or 1");
            }
            if (l == 1.0) != self.self_guided() {
                return bad("lambda is 1 exactly when the self-guided fusion strategy is used");
            }
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.top_k == 0 {
            return bad("top-k must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    pub fn shape_for<T>(&self, samples: &[GroundingSample<T>]) -> Result<GrounderShape> {
        let first = samples.first().ok_or(Error::Empty("grounding dataset"))?;
        Ok(GrounderShape {
            text_dim: first.embeddings.ncols(),
            visual_dim: first.features.ncols(),
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "L_MIL")]
    pub mil: f64,
    #[serde(rename = "L_KD")]
    pub kd: f64,
    #[serde(rename = "L_adp")]
    pub adaptor: f64,
    #[serde(rename = "L_GD")]
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: GrounderParams<T>,
    pub adaptor: AdaptorParams<T>,
    pub log: Vec<EpochLog>,
}

/// Saved grounder state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GrounderCheckpoint<T> {
    pub format: String,
    pub config: TrainConfig,
    pub grounder: GrounderParams<T>,
    pub adaptor: AdaptorParams<T>,
}

impl<T: Scalar> GrounderCheckpoint<T> {
    pub const FORMAT: &'static str = "wssgg-grounder-v1";

    pub fn new(config: TrainConfig, outcome: &TrainOutcome<T>) -> Self {
        GrounderCheckpoint {
            format: Self::FORMAT.to_string(),
            config,
            grounder: outcome.params.clone(),
            adaptor: outcome.adaptor.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = crate::io::read_json(path)?;
        if ck.format != Self::FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format {:?}", ck.format)));
        }
        if !(ck.grounder.all_finite() && ck.adaptor.all_finite()) {
            return Err(Error::Config("checkpoint contains non-finite parameters".into()));
        }
        Ok(ck)
    }
}

/// Initial grounder and adaptor for a config; both derive from the `init`
/// substream of the config seed.
pub fn initial_params<T: Scalar>(shape: GrounderShape, cfg: &TrainConfig) -> (GrounderParams<T>, AdaptorParams<T>) {
    let seed = substream_seed(cfg.seed, INIT);
    let params = GrounderParams::init(shape, Activation::Relu, seed);
    let mut rng = substream(seed, "adaptor");
    let adaptor = AdaptorParams::init(shape.embed_dim, &mut rng);
    (params, adaptor)
}

/// Mini-batch training of the grounder on `L_GD`.
pub fn train_grounder<T: Scalar>(samples: &[GroundingSample<T>], cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let shape = cfg.shape_for(samples)?;
    for s in samples {
        if s.embeddings.ncols() != shape.text_dim || s.features.ncols() != shape.visual_dim {
            return Err(Error::InvalidRecord {
                image_id: s.image_id.clone(),
                reason: "feature or embedding width differs from the rest of the dataset".into(),
            });
        }
    }
    let (mut params, mut adaptor) = initial_params::<T>(shape, cfg);
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut opt = Adam::new(adam, &params);
    let mut adaptor_opt = Adam::new(adam, &adaptor);
    let mut order_rng = substream(cfg.seed, TRAINER);
    let mut sampler = substream(cfg.seed, SAMPLER);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let update_adaptor = cfg.lambda() != 0.0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = LossBreakdown::<T>::default();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&GroundingSample<T>> = chunk.iter().map(|&i| &samples[i]).collect();
            let negatives: Vec<Vec<Vec<T>>> = if cfg.self_guided() {
                batch
                    .iter()
                    .map(|s| (0..s.num_entities()).map(|_| random_attention(s.num_proposals(), &mut sampler)).collect())
                    .collect()
            } else {
                Vec::new()
            };
            let plans = plan_batch(&params, &adaptor, &batch, cfg, &negatives)?;
            let (loss, grads) = batch_objective(&params, &adaptor, &batch, &plans, cfg)?;
            if !loss.is_finite() || !grads.grounder.all_finite() || !grads.adaptor.all_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: format!(
                        "L_MIL={:?} L_KD={:?} L_adp={:?}; images {:?}",
                        loss.mil,
                        loss.kd,
                        loss.adaptor,
                        batch.iter().map(|s| s.image_id.as_str()).collect::<Vec<_>>()
                    ),
                });
            }
            opt.step(&mut params, &grads.grounder);
            if update_adaptor {
                adaptor_opt.step(&mut adaptor, &grads.adaptor);
            }
            if !params.all_finite() || !adaptor.all_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    detail: "parameters became non-finite after an update".into(),
                });
            }
            epoch_loss.accumulate(&loss);
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            mil: epoch_loss.mil.to_f64_lossy(),
            kd: epoch_loss.kd.to_f64_lossy(),
            adaptor: epoch_loss.adaptor.to_f64_lossy(),
            total: epoch_loss.total.to_f64_lossy(),
        };
        debug!("epoch {}: {:?}", entry.epoch, entry);
        log.push(entry);
    }
    Ok(TrainOutcome { params, adaptor, log })
}

pub fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(crate::io::create(path)?);
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Entity-by-proposal similarity for one sample.
pub fn similarity<T: Scalar>(params: &GrounderParams<T>, sample: &GroundingSample<T>) -> Result<Array2<T>> {
    let h = params.encode_text(sample.embeddings.view())?;
    let v = params.encode_visual(sample.features.view())?;
    params.similarity_matrix(h.view(), v.view())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundingAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Top-1 agreement of the grounder with known entity-to-proposal alignments.
/// Samples without an alignment record are ignored.
pub fn grounding_accuracy<T: Scalar>(
    params: &GrounderParams<T>,
    samples: &[GroundingSample<T>],
    alignments: &BTreeMap<String, Vec<usize>>,
) -> Result<GroundingAccuracy> {
    let mut correct = 0;
    let mut total = 0;
    for s in samples {
        let Some(truth) = alignments.get(&s.image_id) else { continue };
        let a = similarity(params, s)?;
        for (row, &t) in a.rows().into_iter().zip(truth) {
            total += 1;
            if argmax(&row.to_vec()) == Some(t) {
                correct += 1;
            }
        }
    }
    Ok(GroundingAccuracy {
        correct,
        total,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
    })
}
