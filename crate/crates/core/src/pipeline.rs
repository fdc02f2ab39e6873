//! Stage wiring: file loading for each stage and the end-to-end run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{DataPaths, RunConfig};
use crate::error::{Error, Result, StageContext};
use crate::eval::{evaluate, write_per_image_csv, EvalReport, SceneGraphPrediction};
use crate::fusion::FusionStrategy;
use crate::io::{read_bulk, read_jsonl, write_jsonl, AlignmentRecord, EmbeddingRecord, ExpertRecord, GtRecord};
use crate::ir::{ImageRecord, PseudoSceneGraph, UnlocalizedSceneGraph};
use crate::parsing::{parse_caption_file, ParserRuleSet};
use crate::pseudo::generate_pseudo_gt;
use crate::sgg::{sgg_predict, sgg_train, write_sgg_log, SggEpochLog, SggParams};
use crate::synth::{generate, SynthDataset};
use crate::teachers::{ActivationMap, ActivationMeta, SynonymMatcher};
use crate::training::{
    build_dataset, grounding_accuracy, train_grounder, write_train_log, EpochLog, GrounderCheckpoint,
    GroundingAccuracy, GroundingInputs, GroundingSample, TeacherSet, TrainConfig, TrainOutcome,
};
use crate::Real;

/// Output file names inside a run directory.
pub mod outputs {
    pub const GRAPHS: &str = "graphs.jsonl";
    pub const GROUNDER: &str = "grounder.json";
    pub const GROUND_LOG: &str = "ground_log.csv";
    pub const PSEUDO: &str = "pseudo.jsonl";
    pub const SGG: &str = "sgg.json";
    pub const SGG_LOG: &str = "sgg_log.csv";
    pub const PREDICTIONS: &str = "predictions.jsonl";
    pub const PER_IMAGE: &str = "per_image_recall.csv";
    pub const REPORT: &str = "report.json";
}

/// Reads activation maps from JSONL, or from a bulk header whose binary
/// stream sits next to it with a `.bin` extension.
pub fn load_activations(path: &Path) -> Result<Vec<ActivationMap>> {
    let maps: Vec<ActivationMap> = if path.extension().is_some_and(|e| e == "jsonl") {
        read_jsonl(path)?
    } else {
        read_bulk::<ActivationMeta>(path, &path.with_extension("bin"))?
            .into_iter()
            .map(|(meta, grid)| ActivationMap::from_parts(meta, grid))
            .collect::<Result<_>>()?
    };
    for m in &maps {
        m.validate()?;
    }
    Ok(maps)
}

fn required<'a>(path: &'a Option<PathBuf>, what: &'static str) -> Result<&'a Path> {
    path.as_deref().ok_or(Error::ProviderMiss {
        what,
        key: "configured data".into(),
    })
}

/// Graphs from captions when a caption file is configured, else from a
/// graph file.
pub fn load_graphs(paths: &DataPaths) -> Result<(Vec<UnlocalizedSceneGraph>, ParserRuleSet)> {
    let rules = match &paths.rules {
        Some(p) => ParserRuleSet::from_json_file(p)?,
        None => ParserRuleSet::default(),
    };
    let graphs = match (&paths.captions, &paths.graphs) {
        (Some(c), _) => parse_caption_file(c, &rules)?,
        (None, Some(g)) => read_jsonl(g)?,
        (None, None) => {
            return Err(Error::ProviderMiss {
                what: "captions or graphs",
                key: "configured data".into(),
            })
        }
    };
    Ok((graphs, rules))
}

/// Inputs of the grounding stage, loaded.
#[derive(Debug, Clone, Default)]
pub struct GroundingData {
    pub images: Vec<ImageRecord>,
    pub graphs: Vec<UnlocalizedSceneGraph>,
    pub embeddings: Vec<EmbeddingRecord>,
    pub activations: Option<Vec<ActivationMap>>,
    pub expert: Option<Vec<ExpertRecord>>,
    pub alignments: Option<BTreeMap<String, Vec<usize>>>,
    pub synonyms: BTreeMap<String, String>,
}

impl GroundingData {
    pub fn from_synth(ds: &SynthDataset) -> Self {
        GroundingData {
            images: ds.images.clone(),
            graphs: ds.graphs.clone(),
            embeddings: ds.embeddings.clone(),
            activations: Some(ds.activations.clone()),
            expert: Some(ds.expert.clone()),
            alignments: Some(ds.alignment_map()),
            synonyms: ds.rules.synonyms.clone(),
        }
    }

    /// Samples for `cfg`, reading only the provider outputs it needs.
    pub fn samples(&self, cfg: &TrainConfig) -> Result<Vec<GroundingSample<Real>>> {
        let activations = if cfg.teachers.uses_interaction() {
            Some(self.activations.as_deref().ok_or(Error::ProviderMiss {
                what: "activation maps",
                key: "interaction teacher".into(),
            })?)
        } else {
            None
        };
        let expert = if cfg.teachers == TeacherSet::Both && cfg.strategy == FusionStrategy::Expert {
            Some(self.expert.as_deref().ok_or(Error::ProviderMiss {
                what: "expert embeddings",
                key: "expert-guided fusion".into(),
            })?)
        } else {
            None
        };
        let matcher = SynonymMatcher::new(self.synonyms.clone());
        build_dataset(GroundingInputs {
            images: &self.images,
            graphs: &self.graphs,
            embeddings: &self.embeddings,
            activations,
            expert,
            matcher: &matcher,
            temperature: cfg.temperature,
        })
    }
}

/// Trains a grounder and scores it against the known alignments.
pub fn train_and_score(
    data: &GroundingData,
    cfg: &TrainConfig,
) -> Result<(TrainOutcome<Real>, Option<GroundingAccuracy>)> {
    let samples = data.samples(cfg)?;
    let outcome = train_grounder(&samples, cfg)?;
    let accuracy = match &data.alignments {
        Some(a) => Some(grounding_accuracy(&outcome.params, &samples, a)?),
        None => None,
    };
    Ok((outcome, accuracy))
}

pub fn load_alignments(path: &Path) -> Result<BTreeMap<String, Vec<usize>>> {
    let records: Vec<AlignmentRecord> = read_jsonl(path)?;
    Ok(records.into_iter().map(|a| (a.image_id, a.proposals)).collect())
}

pub fn load_grounding_data(paths: &DataPaths, cfg: &TrainConfig) -> Result<GroundingData> {
    let (graphs, rules) = load_graphs(paths)?;
    let needs_expert = cfg.teachers == TeacherSet::Both && cfg.strategy == FusionStrategy::Expert;
    Ok(GroundingData {
        images: read_jsonl(required(&paths.images, "image records")?)?,
        graphs,
        embeddings: read_jsonl(required(&paths.embeddings, "entity embeddings")?)?,
        activations: match (&paths.activations, cfg.teachers.uses_interaction()) {
            (Some(p), true) => Some(load_activations(p)?),
            _ => None,
        },
        expert: match (&paths.expert, needs_expert) {
            (Some(p), true) => Some(read_jsonl(p)?),
            _ => None,
        },
        alignments: paths.alignments.as_deref().map(load_alignments).transpose()?,
        synonyms: rules.synonyms,
    })
}

pub fn predict_all(images: &[ImageRecord], params: &SggParams<Real>, max_triplets: usize) -> Result<Vec<SceneGraphPrediction>> {
    images.iter().map(|img| sgg_predict(img, params, max_triplets)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingSummary {
    pub images: usize,
    pub epochs: usize,
    pub final_loss: Option<EpochLog>,
    pub accuracy: Option<GroundingAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoSummary {
    pub images: usize,
    pub entities: usize,
    pub edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SggSummary {
    pub epochs: usize,
    pub final_loss: Option<SggEpochLog>,
}

/// Everything `run` reports; serialized as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub grounding: GroundingSummary,
    pub pseudo: PseudoSummary,
    pub sgg: SggSummary,
    pub evaluation: Option<EvalReport>,
}

/// Runs every stage, writing each intermediate artifact into
/// `cfg.out_dir`. Errors carry the name of the failing stage.
pub fn run_pipeline(cfg: RunConfig) -> Result<RunReport> {
    let cfg = cfg.finalize().stage("config")?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e)).stage("config")?;
    let o = |name: &str| out.join(name);

    let mut data_cfg = cfg.data.clone();
    if let Some(synth) = &cfg.synth {
        let dir = cfg.synth_dir();
        let ds = generate(synth).stage("synth")?;
        ds.write(&dir).stage("synth")?;
        data_cfg = crate::config::DataConfig {
            dir: Some(dir),
            ..Default::default()
        };
        info!("synthetic dataset written to {}", cfg.synth_dir().display());
    }
    let paths = data_cfg.resolve();

    let data = load_grounding_data(&paths, &cfg.ground).stage("parse")?;
    write_jsonl(&o(outputs::GRAPHS), &data.graphs).stage("parse")?;

    let (outcome, accuracy) = train_and_score(&data, &cfg.ground).stage("ground-train")?;
    GrounderCheckpoint::new(cfg.ground.clone(), &outcome)
        .save(&o(outputs::GROUNDER))
        .stage("ground-train")?;
    write_train_log(&o(outputs::GROUND_LOG), &outcome.log).stage("ground-train")?;
    if let Some(a) = &accuracy {
        info!("grounding top-1 accuracy {:.4} ({}/{})", a.accuracy, a.correct, a.total);
    }

    let pseudo = generate_pseudo_gt(&outcome.params, &data.images, &data.graphs, &data.embeddings, cfg.ground.top_k)
        .stage("pseudo-gen")?;
    write_jsonl(&o(outputs::PSEUDO), &pseudo).stage("pseudo-gen")?;

    let sgg = sgg_train::<Real>(&pseudo, &data.images, &cfg.sgg).stage("sgg-train")?;
    sgg.params.save(&o(outputs::SGG)).stage("sgg-train")?;
    write_sgg_log(&o(outputs::SGG_LOG), &sgg.log).stage("sgg-train")?;

    let evaluation = match (&paths.test_images, &paths.test_gt) {
        (Some(ti), Some(tg)) => {
            let test_images: Vec<ImageRecord> = read_jsonl(ti).stage("sgg-predict")?;
            let predictions = predict_all(&test_images, &sgg.params, cfg.sgg.max_triplets).stage("sgg-predict")?;
            write_jsonl(&o(outputs::PREDICTIONS), &predictions).stage("sgg-predict")?;
            let gt: Vec<GtRecord> = read_jsonl(tg).stage("eval")?;
            let report = evaluate(&predictions, &gt, &cfg.eval.specs()?).stage("eval")?;
            write_per_image_csv(&o(outputs::PER_IMAGE), &report.per_image).stage("eval")?;
            Some(report)
        }
        _ => {
            warn!("no test images or ground truth configured; skipping evaluation");
            None
        }
    };

    let report = RunReport {
        seed: cfg.seed,
        grounding: GroundingSummary {
            images: data.graphs.len(),
            epochs: outcome.log.len(),
            final_loss: outcome.log.last().copied(),
            accuracy,
        },
        pseudo: summarize(&pseudo),
        sgg: SggSummary {
            epochs: sgg.log.len(),
            final_loss: sgg.log.last().copied(),
        },
        evaluation,
    };
    crate::io::write_json(&o(outputs::REPORT), &report).stage("report")?;
    Ok(report)
}

fn summarize(pseudo: &[PseudoSceneGraph]) -> PseudoSummary {
    PseudoSummary {
        images: pseudo.len(),
        entities: pseudo.iter().map(|p| p.grounded_entities.len()).sum(),
        edges: pseudo.iter().map(|p| p.edges.len()).sum(),
    }
}
