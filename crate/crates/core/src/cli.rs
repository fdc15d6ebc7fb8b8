//! Command-line front end. `run` parses arguments, loads the TOML config,
//! applies `key=value` overrides, snapshots the effective config into the
//! output directory and dispatches to the library.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::arrangement::{generate_scenario, run_scenario, summarize, ArrangementConfig};
use crate::data_synth::{generate_dataset, DatasetConfig, SceneSpec};
use crate::dataset::{read_dataset, read_manifest, read_split, write_dataset, DatasetSplits, Split};
use crate::error::{Error, Result};
use crate::metrics::{episode_ground_truth, evaluate_predictions, MetricsReport};
use crate::net::load_checkpoint;
use crate::render::{render_ground_truth, render_predictions};
use crate::trainer::{evaluate_model, infer_episode, train, Ablations, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArrangeSection {
    pub num_scenarios: usize,
    pub object_counts: Vec<usize>,
    pub seed: u64,
    pub scene: SceneSpec,
    pub planner: ArrangementConfig,
}

impl Default for ArrangeSection {
    fn default() -> Self {
        ArrangeSection {
            num_scenarios: 20,
            object_counts: vec![2, 3, 4],
            seed: 0,
            scene: SceneSpec { sprite_radius: (3, 5), arm_enabled: false, ..SceneSpec::default() },
            planner: ArrangementConfig::default(),
        }
    }
}

/// Everything a command can be configured with.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    /// Dataset root read by train, eval and render.
    pub dataset_dir: Option<PathBuf>,
    pub data: DatasetConfig,
    pub train: TrainConfig,
    pub arrange: ArrangeSection,
}

#[derive(Debug, Parser)]
#[command(name = "apex", about = "Unsupervised object segmentation and tracking on tabletop video")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "ablation")]
    pub ablations: Vec<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = ["train", "val", "test"])]
    pub split: Option<String>,
    /// Dataset root; overrides `dataset_dir`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `dotted.key=value` config overrides.
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(Common),
    /// Train a model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Segmentation metrics of a checkpoint.
    EvalSeg(EvalArgs),
    /// Tracking metrics of a checkpoint.
    EvalTrack(EvalArgs),
    /// Rearrangement scenarios; without a checkpoint perception uses ground truth.
    Arrange(Common),
    /// Overlay strips for one episode.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        episode: usize,
    },
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Score the ground truth against itself instead of a model.
    #[arg(long)]
    pub gt_as_pred: bool,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Spec(_) => EXIT_CONFIG,
        Error::Dataset { .. } | Error::Episode { .. } | Error::OverDense { .. } | Error::Image(_) => EXIT_DATA,
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        _ => EXIT_FAILURE,
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` inside `root`, creating tables as needed.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Loads the config file (if any), applies overrides and common flags.
pub fn load_config(common: &Common) -> Result<AppConfig> {
    let mut table = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in &common.overrides {
        apply_override(&mut table, o)?;
    }
    let mut cfg: AppConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    if let Some(seed) = common.seed {
        cfg.data.scene.rng_seed = seed;
        cfg.train.seed = seed;
        cfg.arrange.seed = seed;
    }
    if !common.ablations.is_empty() {
        let extra = Ablations::from_names(&common.ablations)?;
        let a = &mut cfg.train.ablations;
        a.image_space_stn |= extra.image_space_stn;
        a.no_entropy_loss |= extra.no_entropy_loss;
        a.scalor_norm |= extra.scalor_norm;
        a.gaussian_likelihood |= extra.gaussian_likelihood;
    }
    if common.data.is_some() {
        cfg.dataset_dir = common.data.clone();
    }
    Ok(cfg)
}

/// Writes `config.toml` into `out` so the run can be reproduced.
pub fn write_snapshot(cfg: &AppConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(out.join("config.toml"), text)?;
    Ok(())
}

fn out_dir(common: &Common) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn dataset_root(cfg: &AppConfig) -> Result<&Path> {
    cfg.dataset_dir.as_deref().ok_or_else(|| Error::Config("no dataset: pass --data or set dataset_dir".into()))
}

fn split_of(common: &Common, default: Split) -> Result<Split> {
    common.split.as_deref().map_or(Ok(default), str::parse)
}

fn eval(args: &EvalArgs, tracking: bool) -> Result<MetricsReport> {
    let c = &args.common;
    let cfg = load_config(c)?;
    let out = out_dir(c);
    write_snapshot(&cfg, &out)?;
    let root = dataset_root(&cfg)?;
    let split = split_of(c, Split::Test)?;
    let episodes = read_split(root, split, &read_manifest(root)?)?;
    let report = if args.gt_as_pred {
        let items = episodes
            .iter()
            .map(|ep| {
                let (f, t) = episode_ground_truth(ep)?;
                Ok((f.clone(), t.clone(), f, t))
            })
            .collect::<Result<Vec<_>>>()?;
        evaluate_predictions(split.name(), &items, &cfg.train.mot)?
    } else {
        let ckpt = c.checkpoint.as_deref().ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
        let model = load_checkpoint(ckpt, &candle_core::Device::Cpu)?.model;
        evaluate_model(&model, &episodes, split.name(), &cfg.train.mot)?
    };
    report.write(&out.join("metrics.json"))?;
    if tracking {
        println!("{}", serde_json::to_string_pretty(&report.tracking)?);
    } else {
        println!("{}", serde_json::to_string_pretty(&report.segmentation)?);
    }
    Ok(report)
}

fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::GenData(c) => {
            let cfg = load_config(c)?;
            let out = out_dir(c);
            write_snapshot(&cfg, &out)?;
            let eps = generate_dataset(&cfg.data)?;
            let splits = DatasetSplits::from_episodes(eps, cfg.data.split_ratio);
            let manifest = write_dataset(&splits, &out, &cfg.data.scene.hash())?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
        }
        Command::Train { common: c, resume } => {
            let cfg = load_config(c)?;
            cfg.train.validate()?;
            let out = out_dir(c);
            write_snapshot(&cfg, &out)?;
            let data = read_dataset(dataset_root(&cfg)?)?;
            let summary = train(&cfg.train, &data.train, &data.val, &out, resume.as_deref())?;
            println!("final checkpoint: {}", summary.final_checkpoint.display());
        }
        Command::EvalSeg(a) => {
            eval(a, false)?;
        }
        Command::EvalTrack(a) => {
            eval(a, true)?;
        }
        Command::Arrange(c) => {
            let cfg = load_config(c)?;
            let out = out_dir(c);
            write_snapshot(&cfg, &out)?;
            let a = &cfg.arrange;
            let model = match &c.checkpoint {
                Some(p) => Some(load_checkpoint(p, &candle_core::Device::Cpu)?.model),
                None => None,
            };
            if a.object_counts.is_empty() {
                return Err(Error::Config("arrange.object_counts is empty".into()));
            }
            let mut results = Vec::with_capacity(a.num_scenarios);
            for k in 0..a.num_scenarios {
                let n = a.object_counts[k % a.object_counts.len()];
                let mut spec = a.scene.clone();
                spec.image_height = model.as_ref().map_or(spec.image_height, |m| m.config.image_height);
                spec.image_width = model.as_ref().map_or(spec.image_width, |m| m.config.image_width);
                let sc = generate_scenario(&spec, n, a.seed.wrapping_add(k as u64))?;
                results.push(run_scenario(&sc, model.as_ref(), &a.planner)?);
            }
            let perception = if model.is_some() { "model" } else { "ground-truth" };
            let report = summarize(perception, a.planner.matching, results);
            std::fs::write(out.join("arrangement.json"), serde_json::to_string_pretty(&report)?)?;
            println!("mean distance {:.4} +- {:.4} ({} of {} solved)", report.mean, report.std, report.solved, report.scenarios.len());
        }
        Command::Render { common: c, episode } => {
            let cfg = load_config(c)?;
            let out = out_dir(c);
            write_snapshot(&cfg, &out)?;
            let root = dataset_root(&cfg)?;
            let split = split_of(c, Split::Test)?;
            let eps = read_split(root, split, &read_manifest(root)?)?;
            let ep = eps.get(*episode).ok_or_else(|| Error::Episode {
                episode: *episode,
                reason: format!("{} split has {} episodes", split.name(), eps.len()),
            })?;
            let written = match &c.checkpoint {
                Some(p) => {
                    let model = load_checkpoint(p, &candle_core::Device::Cpu)?.model;
                    render_predictions(ep, &infer_episode(&model, ep)?, &out)?
                }
                None => render_ground_truth(ep, &out)?,
            };
            println!("wrote {} overlays to {}", written.len(), out.display());
        }
    }
    Ok(())
}

/// Runs the command line and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
