//! Run configuration: one TOML file with a global seed and a section per
//! stage.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/demo"
//!
//! [synth]
//! images = 40
//!
//! [ground]
//! epochs = 30
//! strategy = "self"
//!
//! [sgg]
//! epochs = 20
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::MetricSpec;
use crate::sgg::SggConfig;
use crate::synth::{files, SynthConfig};
use crate::training::TrainConfig;

/// Input files of a run. Unset entries fall back to the standard file name
/// inside `dir`, when that file exists.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub captions: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    pub graphs: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub activations: Option<PathBuf>,
    pub expert: Option<PathBuf>,
    pub alignments: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_gt: Option<PathBuf>,
}

/// Input files after defaults are applied.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataPaths {
    pub captions: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    pub graphs: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub activations: Option<PathBuf>,
    pub expert: Option<PathBuf>,
    pub alignments: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_gt: Option<PathBuf>,
}

impl DataConfig {
    pub fn resolve(&self) -> DataPaths {
        let pick = |explicit: &Option<PathBuf>, name: &str| -> Option<PathBuf> {
            explicit.clone().or_else(|| {
                let p = self.dir.as_ref()?.join(name);
                p.exists().then_some(p)
            })
        };
        DataPaths {
            captions: pick(&self.captions, files::CAPTIONS),
            rules: pick(&self.rules, files::RULES),
            graphs: pick(&self.graphs, files::GRAPHS),
            images: pick(&self.images, files::IMAGES),
            embeddings: pick(&self.embeddings, files::EMBEDDINGS),
            activations: pick(&self.activations, files::ACTIVATIONS),
            expert: pick(&self.expert, files::EXPERT),
            alignments: pick(&self.alignments, files::ALIGNMENTS),
            test_images: pick(&self.test_images, files::TEST_IMAGES),
            test_gt: pick(&self.test_gt, files::TEST_GT),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metrics: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metrics: MetricSpec::defaults().iter().map(MetricSpec::name).collect(),
        }
    }
}

impl EvalConfig {
    pub fn specs(&self) -> Result<Vec<MetricSpec>> {
        MetricSpec::parse_list(&self.metrics.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream; overrides the per-stage `seed` keys.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    /// When present, a dataset is generated into `<out_dir>/data` and used
    /// in place of `data`.
    pub synth: Option<SynthConfig>,
    pub ground: TrainConfig,
    pub sgg: SggConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("run"),
            data: DataConfig::default(),
            synth: None,
            ground: TrainConfig::default(),
            sgg: SggConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Pushes the global seed into every stage and checks each section.
    pub fn finalize(mut self) -> Result<Self> {
        self.ground.seed = self.seed;
        self.sgg.seed = self.seed;
        if let Some(s) = self.synth.as_mut() {
            s.seed = self.seed;
            s.validate()?;
        }
        self.ground.validate()?;
        self.eval.specs()?;
        Ok(self)
    }

    pub fn synth_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }
}
