//! The `gridnet` command line: `report`, `train`, `eval`, `infer` and
//! `gradcheck`.
//!
//! Every command reads one JSON [`RunConfig`] (defaults when `--config` is
//! absent); flags override its fields. Exit codes: 0 success, 1 usage or
//! configuration error, 2 runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{read_ppm, write_pgm8, write_ppm, AugmentConfig, DatasetManifest};
use crate::grid::{gradcheck_grid, grid_report, GridModel, GridSpec};
use crate::metrics::{evaluate, multiscale_predict, predict_scenes_parallel, CategoryMap};
use crate::tensor::gradcheck::GradcheckConfig;
use crate::train::{load_checkpoint, save_checkpoint, TrainConfig, Trainer};

/// Scene generator settings for the training and evaluation sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub width: usize,
    pub height: usize,
    pub max_shapes: usize,
    pub train_first_seed: u64,
    pub train_scenes: usize,
    pub eval_first_seed: u64,
    pub eval_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            width: 128,
            height: 128,
            max_shapes: 6,
            train_first_seed: 0,
            train_scenes: 200,
            eval_first_seed: 1_000_000,
            eval_scenes: 50,
        }
    }
}

/// One experiment, serializable as a single JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    /// Test-time scales for the majority vote.
    pub scales: Vec<f64>,
    pub output_dir: PathBuf,
    /// Seeds parameter initialization and training; overrides `train.seed`.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid: GridSpec::symmetric(5, 2, 2, 4, 4),
            data: DataConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainConfig::default(),
            scales: vec![1.0, 1.0 / 1.5, 0.5, 0.4],
            output_dir: PathBuf::from("runs/desk"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                RunConfig::from_json(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: &dyn std::fmt::Display| CliError::Usage(e.to_string());
        self.grid.validate().map_err(|e| usage(&e))?;
        self.train.validate().map_err(|e| usage(&e))?;
        self.augment
            .validate(self.data.width, self.data.height)
            .map_err(|e| usage(&e))?;
        let min = self.grid.min_input_side();
        if self.augment.out_size < min {
            return Err(CliError::Usage(format!(
                "out_size {} is below the {min} pixels needed by {} streams",
                self.augment.out_size, self.grid.n_streams
            )));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(CliError::Usage("scales must be a non-empty list of positive numbers".into()));
        }
        Ok(())
    }

    fn train_manifest(&self) -> DatasetManifest {
        let d = &self.data;
        DatasetManifest::range(d.width, d.height, self.grid.num_classes, d.max_shapes, d.train_first_seed, d.train_scenes)
    }

    fn eval_manifest(&self) -> DatasetManifest {
        let d = &self.data;
        DatasetManifest::range(d.width, d.height, self.grid.num_classes, d.max_shapes, d.eval_first_seed, d.eval_scenes)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "gridnet", version, about = "Grid networks for semantic segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print stream shapes and parameter/activation counts as JSON.
    Report {
        #[command(flatten)]
        common: Common,
        /// Resolution used for the stream shapes and activation count.
        #[arg(long)]
        input_size: Option<usize>,
    },
    /// Train on synthetic scenes, writing checkpoints and a JSON-lines log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Score a checkpoint on the evaluation scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated test scales, e.g. `1,0.5`.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
        /// Scene seeds to evaluate instead of the configured range.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Write the report here as well as to standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Segment one PPM image.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output prefix: writes `<prefix>_color.ppm` and `<prefix>_labels.pgm`.
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
    },
    /// Compare analytic and finite-difference gradients of a small grid.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Input side length.
        #[arg(long, default_value_t = 16)]
        size: usize,
    },
}

/// Fixed colours of the rendered segmentations, by class id (cycled).
pub const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [145, 30, 180],
    [70, 240, 240],
    [245, 130, 48],
];

pub fn colorize(labels: &[u8]) -> Vec<u8> {
    labels.iter().flat_map(|&l| PALETTE[l as usize % PALETTE.len()]).collect()
}

fn with_overrides(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.train.seed = cfg.seed;
    if common.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    Ok(cfg)
}

/// Grid report for `cfg` at `input_size` (training size by default).
pub fn cmd_report(cfg: &RunConfig, input_size: Option<usize>) -> Result<String, CliError> {
    cfg.grid.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let side = input_size.unwrap_or(cfg.augment.out_size);
    let model = GridModel::<f32>::build(&cfg.grid, (side, side), cfg.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(serde_json::to_string_pretty(&grid_report(&model)).expect("report serializes"))
}

/// Trains per `cfg`, returning the final checkpoint path.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(runtime)?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = load_checkpoint(path).map_err(runtime)?;
            ck.check_spec(&cfg.grid).map_err(|e| CliError::Usage(format!("cannot resume: {e}")))?;
            let mut t = ck.into_trainer();
            t.cfg.epochs = cfg.train.epochs;
            t
        }
        None => {
            let side = cfg.augment.out_size;
            let model = GridModel::build(&cfg.grid, (side, side), cfg.seed).map_err(runtime)?;
            Trainer::new(model, cfg.train.clone()).map_err(|e| CliError::Usage(e.to_string()))?
        }
    };
    fs::write(out.join("config.json"), cfg.to_json()).map_err(runtime)?;
    let manifest = cfg.train_manifest();
    fs::write(out.join("train_manifest.json"), manifest.to_json()).map_err(runtime)?;
    let scenes = manifest.generate().map_err(runtime)?;
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("train_log.jsonl"))
        .map_err(runtime)?;
    if trainer.epoch == 0 {
        save_checkpoint(&trainer, &out.join("epoch_0000.ckpt")).map_err(runtime)?;
    }
    while trainer.epoch < trainer.cfg.epochs {
        let entry = trainer.train_epoch(&scenes, &cfg.augment).map_err(runtime)?;
        entry.write_jsonl(&mut log).map_err(runtime)?;
        log.flush().map_err(runtime)?;
        info!("epoch {} loss {:.5} lr {:.3e}", entry.epoch, entry.mean_loss, entry.lr_last);
        let every = trainer.cfg.snapshot_every;
        if every > 0 && trainer.epoch % every == 0 && trainer.epoch < trainer.cfg.epochs {
            save_checkpoint(&trainer, &out.join(format!("epoch_{:04}.ckpt", trainer.epoch))).map_err(runtime)?;
        }
    }
    let last = out.join("final.ckpt");
    save_checkpoint(&trainer, &last).map_err(runtime)?;
    Ok(last)
}

/// Metrics report JSON for a checkpoint on the configured (or given) scenes.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    seeds: Option<&[u64]>,
    threads: usize,
) -> Result<String, CliError> {
    cfg.validate()?;
    let ck = load_checkpoint(checkpoint).map_err(runtime)?;
    let mut manifest = cfg.eval_manifest();
    manifest.num_classes = ck.model.spec().num_classes;
    if let Some(s) = seeds {
        manifest.seeds = s.to_vec();
    }
    let scenes = manifest.generate().map_err(runtime)?;
    let samples = predict_scenes_parallel(&ck.model, &scenes, &cfg.scales, threads).map_err(runtime)?;
    let num_classes = ck.model.spec().num_classes;
    let report = evaluate(&samples, num_classes, &CategoryMap::default_for(num_classes)).map_err(runtime)?;
    Ok(serde_json::to_string_pretty(&report).expect("report serializes"))
}

/// Writes `<prefix>_color.ppm` and `<prefix>_labels.pgm`.
pub fn cmd_infer(checkpoint: &Path, image: &Path, output: &Path, scales: &[f64]) -> Result<(), CliError> {
    let mut ck = load_checkpoint(checkpoint).map_err(runtime)?;
    let (w, h, pixels) = read_ppm(image).map_err(runtime)?;
    let labels = multiscale_predict(&mut ck.model, &pixels, (h, w), scales).map_err(runtime)?;
    let prefix = output.display().to_string();
    write_ppm(Path::new(&format!("{prefix}_color.ppm")), w, h, &colorize(&labels)).map_err(runtime)?;
    write_pgm8(Path::new(&format!("{prefix}_labels.pgm")), w, h, &labels).map_err(runtime)?;
    Ok(())
}

/// Gradient check of a 3-stream grid with one subsampling and one
/// upsampling column, as JSON.
pub fn cmd_gradcheck(seed: u64, samples: usize, tolerance: f64, size: usize) -> Result<(String, bool), CliError> {
    let spec = GridSpec::symmetric(3, 1, 1, 4, 4);
    let cfg = GradcheckConfig {
        samples,
        tolerance,
        seed,
        ..Default::default()
    };
    let report = gradcheck_grid(&spec, 1, (size, size), &cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    let passed = report.passed();
    Ok((serde_json::to_string_pretty(&report).expect("report serializes"), passed))
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("gridnet: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Report { common, input_size } => {
            let cfg = with_overrides(&common)?;
            println!("{}", cmd_report(&cfg, input_size)?);
        }
        Command::Train {
            common,
            resume,
            epochs,
            output_dir,
        } => {
            let mut cfg = with_overrides(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
                cfg.train.lr_drop_epoch = cfg.train.lr_drop_epoch.min(e);
            }
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            let last = cmd_train(&cfg, resume.as_deref())?;
            println!("{}", last.display());
        }
        Command::Eval {
            common,
            checkpoint,
            scales,
            seeds,
            output,
        } => {
            let mut cfg = with_overrides(&common)?;
            if let Some(s) = scales {
                cfg.scales = s;
            }
            let report = cmd_eval(&cfg, &checkpoint, seeds.as_deref(), common.threads)?;
            if let Some(path) = output {
                fs::write(path, &report).map_err(runtime)?;
            }
            println!("{report}");
        }
        Command::Infer {
            common,
            checkpoint,
            image,
            output,
            scales,
        } => {
            let cfg = with_overrides(&common)?;
            cmd_infer(&checkpoint, &image, &output, &scales.unwrap_or(cfg.scales))?;
        }
        Command::Gradcheck {
            common,
            samples,
            tolerance,
            size,
        } => {
            let (report, passed) = cmd_gradcheck(common.seed.unwrap_or(0), samples, tolerance, size)?;
            println!("{report}");
            if !passed {
                return Err(CliError::Runtime("gradient check failed".into()));
            }
        }
    }
    Ok(())
}
