//! `wssgg`: one subcommand per pipeline stage, plus `run` for the whole
//! pipeline. Failures print the stage that raised them and exit nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use wssgg_core::config::{DataConfig, DataPaths, RunConfig};
use wssgg_core::error::{Error, Result, StageContext};
use wssgg_core::eval::{evaluate, write_per_image_csv, MetricSpec, SceneGraphPrediction};
use wssgg_core::fusion::FusionStrategy;
use wssgg_core::io::{read_jsonl, write_json, write_jsonl, EmbeddingRecord, GtRecord};
use wssgg_core::ir::{ImageRecord, PseudoSceneGraph};
use wssgg_core::parsing::{parse_caption_file, ParserRuleSet};
use wssgg_core::pipeline::{load_graphs, load_grounding_data, predict_all, run_pipeline, train_and_score};
use wssgg_core::pseudo::generate_pseudo_gt;
use wssgg_core::sgg::{sgg_train, write_sgg_log, SggParams};
use wssgg_core::synth::generate;
use wssgg_core::training::{write_train_log, GrounderCheckpoint, TeacherSet};
use wssgg_core::Real;

#[derive(Parser, Debug)]
#[command(name = "wssgg", version, about = "Weakly supervised scene graph generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse captions into unlocalized scene graphs.
    Parse(ParseArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train the grounding network with MIL and teacher distillation.
    GroundTrain(GroundTrainArgs),
    /// Keep each entity's top-K proposals under a trained grounder.
    PseudoGen(PseudoGenArgs),
    /// Train the scene graph classifier on pseudo labels.
    SggTrain(SggTrainArgs),
    /// Predict scene graphs for a set of images.
    SggPredict(SggPredictArgs),
    /// Score predictions with Recall@K and mAP.
    Eval(EvalArgs),
    /// Run every stage from one config file.
    Run(RunArgs),
}

/// Input files. Anything not given explicitly is looked up by its standard
/// name inside the data directory.
#[derive(Args, Debug, Default)]
struct DataArgs {
    #[arg(long, env = "WSSGG_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    captions: Option<PathBuf>,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    graphs: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    activations: Option<PathBuf>,
    #[arg(long)]
    expert: Option<PathBuf>,
    #[arg(long)]
    alignments: Option<PathBuf>,
}

impl DataArgs {
    /// Flags win over the config file's `[data]` section.
    fn over(self, file: DataConfig) -> DataConfig {
        DataConfig {
            dir: self.data_dir.or(file.dir),
            captions: self.captions.or(file.captions),
            rules: self.rules.or(file.rules),
            graphs: self.graphs.or(file.graphs),
            images: self.images.or(file.images),
            embeddings: self.embeddings.or(file.embeddings),
            activations: self.activations.or(file.activations),
            expert: self.expert.or(file.expert),
            alignments: self.alignments.or(file.alignments),
            ..file
        }
    }
}

/// Config file plus the overrides every training stage accepts.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// Run config (TOML); only the sections a stage needs are read.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct ParseArgs {
    /// JSONL of `{image_id, caption}`.
    #[arg(long)]
    captions: PathBuf,
    /// Parser rule set (JSON); built-in defaults when omitted.
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    categories: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GroundTrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    epochs: Option<usize>,
    /// average, expert or self.
    #[arg(long)]
    strategy: Option<FusionStrategy>,
    /// none, object, interaction or both.
    #[arg(long)]
    teachers: Option<TeacherSet>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PseudoGenArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Grounder checkpoint written by `ground-train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Candidates kept per entity; the checkpoint's value when omitted.
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SggTrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    pseudo: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SggPredictArgs {
    /// Image records; `test_images.jsonl` in the data directory by default.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long, env = "WSSGG_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    max_triplets: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    /// Ground truth; `test_gt.jsonl` in the data directory by default.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, env = "WSSGG_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value = "recall@20,recall@50,recall@100,map")]
    metrics: String,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-image recall CSV.
    #[arg(long)]
    per_image: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, env = "WSSGG_OUT_DIR")]
    out_dir: Option<PathBuf>,
}

fn need(path: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::Config(format!("no {flag} given and none found in the data directory")))
}

fn log_path(explicit: Option<PathBuf>, out: &Path) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".log.csv");
        out.with_file_name(name)
    })
}

fn parse(a: ParseArgs) -> Result<()> {
    let rules = match &a.rules {
        Some(p) => ParserRuleSet::from_json_file(p)?,
        None => ParserRuleSet::default(),
    };
    let graphs = parse_caption_file(&a.captions, &rules)?;
    write_jsonl(&a.out, &graphs)?;
    let edges: usize = graphs.iter().map(|g| g.edges.len()).sum();
    info!("parsed {} captions into {edges} triplets", graphs.len());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let mut s = cfg.synth.unwrap_or_default();
    s.seed = cfg.seed;
    if let Some(n) = a.images {
        s.images = n;
    }
    if let Some(n) = a.categories {
        s.categories = n;
    }
    s.validate()?;
    let ds = generate(&s)?;
    let files = ds.write(&a.out)?;
    info!("wrote {} files to {}", files.len(), a.out.display());
    Ok(())
}

fn ground_train(a: GroundTrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    cfg.data = a.data.over(cfg.data);
    if let Some(e) = a.epochs {
        cfg.ground.epochs = e;
    }
    if let Some(s) = a.strategy {
        cfg.ground.strategy = s;
    }
    if let Some(t) = a.teachers {
        cfg.ground.teachers = t;
    }
    let cfg = cfg.finalize()?;
    let data = load_grounding_data(&cfg.data.resolve(), &cfg.ground)?;
    let (outcome, accuracy) = train_and_score(&data, &cfg.ground)?;
    GrounderCheckpoint::new(cfg.ground.clone(), &outcome).save(&a.out)?;
    write_train_log(&log_path(a.log, &a.out), &outcome.log)?;
    if let Some(acc) = accuracy {
        println!("grounding accuracy {:.4} ({}/{})", acc.accuracy, acc.correct, acc.total);
    }
    Ok(())
}

fn pseudo_gen(a: PseudoGenArgs) -> Result<()> {
    let ck = GrounderCheckpoint::<Real>::load(&a.checkpoint)?;
    let paths: DataPaths = a.data.over(DataConfig::default()).resolve();
    let (graphs, _) = load_graphs(&paths)?;
    let images: Vec<ImageRecord> = read_jsonl(&need(paths.images, "--images")?)?;
    let embeddings: Vec<EmbeddingRecord> = read_jsonl(&need(paths.embeddings, "--embeddings")?)?;
    let k = a.top_k.unwrap_or(ck.config.top_k);
    let pseudo = generate_pseudo_gt(&ck.grounder, &images, &graphs, &embeddings, k)?;
    write_jsonl(&a.out, &pseudo)?;
    info!("pseudo labels for {} images", pseudo.len());
    Ok(())
}

fn sgg_train_cmd(a: SggTrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    cfg.data = a.data.over(cfg.data);
    if let Some(e) = a.epochs {
        cfg.sgg.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        cfg.sgg.learning_rate = lr;
    }
    let cfg = cfg.finalize()?;
    let pseudo: Vec<PseudoSceneGraph> = read_jsonl(&a.pseudo)?;
    let images: Vec<ImageRecord> = read_jsonl(&need(cfg.data.resolve().images, "--images")?)?;
    let out = sgg_train::<Real>(&pseudo, &images, &cfg.sgg)?;
    out.params.save(&a.out)?;
    write_sgg_log(&log_path(a.log, &a.out), &out.log)?;
    if let Some(last) = out.log.last() {
        println!("final loss {:.4} (object {:.4}, relation {:.4})", last.total, last.object_loss, last.relation_loss);
    }
    Ok(())
}

fn sgg_predict_cmd(a: SggPredictArgs) -> Result<()> {
    let data = DataConfig {
        dir: a.data_dir,
        test_images: a.images,
        ..DataConfig::default()
    };
    let images: Vec<ImageRecord> = read_jsonl(&need(data.resolve().test_images, "--images")?)?;
    let params = SggParams::<Real>::load(&a.checkpoint)?;
    let predictions = predict_all(&images, &params, a.max_triplets)?;
    write_jsonl(&a.out, &predictions)?;
    info!("predicted {} images", predictions.len());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let data = DataConfig {
        dir: a.data_dir,
        test_gt: a.gt,
        ..DataConfig::default()
    };
    let gt: Vec<GtRecord> = read_jsonl(&need(data.resolve().test_gt, "--gt")?)?;
    let predictions: Vec<SceneGraphPrediction> = read_jsonl(&a.predictions)?;
    let report = evaluate(&predictions, &gt, &MetricSpec::parse_list(&a.metrics)?)?;
    if let Some(p) = &a.per_image {
        write_per_image_csv(p, &report.per_image)?;
    }
    match &a.out {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = a.config.load().stage("config")?;
    cfg.data = a.data.over(cfg.data);
    if let Some(d) = a.out_dir {
        cfg.out_dir = d;
    }
    let out_dir = cfg.out_dir.clone();
    let report = run_pipeline(cfg)?;
    if let Some(acc) = &report.grounding.accuracy {
        println!("grounding accuracy {:.4}", acc.accuracy);
    }
    if let Some(ev) = &report.evaluation {
        for (name, value) in &ev.metrics {
            println!("{name} {value:.4}");
        }
    }
    println!("report written to {}", out_dir.join("report.json").display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Parse(a) => parse(a).stage("parse"),
        Command::Synth(a) => synth(a).stage("synth"),
        Command::GroundTrain(a) => ground_train(a).stage("ground-train"),
        Command::PseudoGen(a) => pseudo_gen(a).stage("pseudo-gen"),
        Command::SggTrain(a) => sgg_train_cmd(a).stage("sgg-train"),
        Command::SggPredict(a) => sgg_predict_cmd(a).stage("sgg-predict"),
        Command::Eval(a) => eval(a).stage("eval"),
        Command::Run(a) => run(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
