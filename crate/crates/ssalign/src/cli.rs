//! Batch command-line surface: synth, train, select, eval, report. One
//! command per process; everything a run needs is captured in the config
//! file plus the seed, so experiments replay exactly.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, idx, synth, DomainPair, ShiftSpec};
use crate::error::{Error, Result};
use crate::eval::{compare, evaluate, EvalReport};
use crate::select::{combine, early_stop, SelectionReport};
use crate::selfsup::{TaskKind, TaskSpec};
use crate::train::{fit, log_path, StepMode, TrainConfig, TrainingLog};

/// Prints to stdout, ignoring a closed pipe instead of panicking.
macro_rules! say {
    ($($arg:tt)*) => {
        let _ = writeln!(std::io::stdout(), $($arg)*);
    };
}

/// Environment variable holding the default root for relative data paths.
pub const DATA_ROOT_ENV: &str = "SSALIGN_DATA_ROOT";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataPaths {
    pub source_images: PathBuf,
    pub source_labels: PathBuf,
    pub target_images: PathBuf,
    pub test_images: PathBuf,
    /// Reference labels for the test set; read by `eval` only.
    pub test_labels: Option<PathBuf>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
}

fn default_val_fraction() -> f64 {
    0.1
}

fn default_num_classes() -> usize {
    10
}

/// How `synth` builds the datasets named in `DataPaths`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_source: usize,
    pub n_target: usize,
    pub n_test: usize,
    pub image_size: usize,
    /// Shift pipeline applied to the target and test images.
    pub shifts: Vec<ShiftSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataPaths,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for s in cfg.synth.iter().flat_map(|s| &s.shifts) {
            s.validate()?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(name = "ssalign", about = "self-supervised domain alignment lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment config (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// Root for relative data paths; falls back to $SSALIGN_DATA_ROOT, then
    /// the current directory
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the source/target/test IDX files plus a manifest
    Synth {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train and write per-epoch checkpoints + the training log CSV
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma list of self-supervised tasks
        /// (rotation|flip|loc4|loc_regress|none)
        #[arg(long)]
        tasks: Option<String>,
        /// per_task_loop or joint_step
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Run directory for checkpoints and the log
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick the early-stopping epoch from a training log
    Select {
        /// Run directory holding train_log.csv
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the held-out test set
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Where to write the report JSON
        #[arg(long)]
        out: Option<PathBuf>,
        /// Earlier report to diff against (same test set required)
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Emit per-epoch plot data (epoch, v, w, u, losses) for a run
    Report {
        /// Run directory holding train_log.csv
        #[arg(long)]
        out: PathBuf,
    },
}

fn data_root(common: &CommonArgs) -> PathBuf {
    common
        .data_root
        .clone()
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Comma list -> task specs with ids 1..; "none" or "" -> no tasks.
pub fn parse_tasks(s: &str) -> Result<Vec<TaskSpec>> {
    if s == "none" || s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .enumerate()
        .map(|(i, name)| Ok(TaskSpec::new(i + 1, name.trim().parse::<TaskKind>()?)))
        .collect()
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    synth: SynthConfig,
    files: Vec<ManifestEntry>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn cmd_synth(common: &CommonArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let synth_cfg = cfg
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("config has no synth section".into()))?;
    let seed = common.seed.unwrap_or(cfg.train.seed);
    let root = data_root(common);
    std::fs::create_dir_all(&root).map_err(|e| Error::io(root.display().to_string(), e))?;

    let (src_imgs, src_labels) =
        synth::generate_digits(synth_cfg.n_source, synth_cfg.image_size, seed)?;
    let (tgt_imgs, _) =
        synth::generate_digits(synth_cfg.n_target, synth_cfg.image_size, seed ^ 0x7A97)?;
    let (test_imgs, test_labels) =
        synth::generate_digits(synth_cfg.n_test, synth_cfg.image_size, seed ^ 0x3D41)?;
    let tgt_imgs = data::apply_shifts(&tgt_imgs, &synth_cfg.shifts, seed ^ 0x51)?;
    let test_imgs = data::apply_shifts(&test_imgs, &synth_cfg.shifts, seed ^ 0x52)?;

    let p = &cfg.data;
    let src_i = resolve(&root, &p.source_images);
    let src_l = resolve(&root, &p.source_labels);
    let tgt_i = resolve(&root, &p.target_images);
    let tst_i = resolve(&root, &p.test_images);
    let tst_l = resolve(
        &root,
        p.test_labels
            .as_deref()
            .ok_or_else(|| Error::Config("synth needs data.test_labels for the sidecar".into()))?,
    );
    idx::write_images(&src_i, &src_imgs)?;
    idx::write_labels(&src_l, &src_labels)?;
    idx::write_images(&tgt_i, &tgt_imgs)?;
    idx::write_images(&tst_i, &test_imgs)?;
    // reference labels live only in the eval sidecar; the training files
    // above carry no target annotation
    idx::write_labels(&tst_l, &test_labels)?;

    let files = [&src_i, &src_l, &tgt_i, &tst_i, &tst_l]
        .iter()
        .map(|f| {
            Ok(ManifestEntry {
                path: f.display().to_string(),
                sha256: file_sha256(f)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        seed,
        synth: synth_cfg.clone(),
        files,
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    say!(
        "synth: wrote {} source / {} target / {} test images under {}",
        synth_cfg.n_source,
        synth_cfg.n_target,
        synth_cfg.n_test,
        root.display()
    );
    Ok(())
}

/// Loads the datasets named in the config. Target labels are not read here;
/// train and select never see them.
pub fn load_pair(cfg: &ExperimentConfig, root: &Path, seed: u64) -> Result<DomainPair> {
    let p = &cfg.data;
    let source = idx::load_labeled(
        &resolve(root, &p.source_images),
        &resolve(root, &p.source_labels),
        p.num_classes,
    )?;
    let target = idx::load_unlabeled(&resolve(root, &p.target_images))?;
    let test = idx::load_unlabeled(&resolve(root, &p.test_images))?;
    DomainPair::assemble(source, target, test, p.val_fraction, seed)
}

pub fn cmd_train(
    common: &CommonArgs,
    tasks: Option<&str>,
    mode: Option<&str>,
    epochs: Option<usize>,
    out: &Path,
) -> Result<()> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let mut train_cfg = cfg.train.clone();
    if let Some(s) = common.seed {
        train_cfg.seed = s;
    }
    if let Some(t) = tasks {
        train_cfg.tasks = parse_tasks(t)?;
    }
    if let Some(m) = mode {
        train_cfg.step_mode = m.parse::<StepMode>()?;
    }
    if let Some(e) = epochs {
        train_cfg.epochs = e;
    }
    train_cfg.validate()?;
    let root = data_root(common);
    let data = load_pair(&cfg, &root, train_cfg.seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    write_json(&out.join("config.json"), &train_cfg)?;
    let (_model, log) = fit(&train_cfg, &data, Some(out))?;
    let last = log.records.last().expect("at least one epoch");
    say!(
        "train: {} epochs done, final v={:.6} w={:.6} loss_main={:.6}",
        log.records.len(),
        last.v,
        last.w,
        last.loss_main
    );
    Ok(())
}

pub fn cmd_select(out: &Path) -> Result<()> {
    let log_file = log_path(out);
    let text = std::fs::read_to_string(&log_file)
        .map_err(|e| Error::io(log_file.display().to_string(), e))?;
    let log = TrainingLog::from_csv(&text)?;
    let m = log.measurement_vectors();
    let u = combine(&m.v, &m.w)?;
    let epoch = early_stop(&u)?;
    let ckpt = out.join(format!("ckpt_{:03}.bin", epoch + 1));
    let report = SelectionReport {
        run: 0,
        epoch,
        v: m.v,
        w: m.w,
        u: u.clone(),
        checkpoint: ckpt.is_file().then(|| ckpt.display().to_string()),
    };
    write_json(&out.join("selection.json"), &report)?;
    say!("select: epoch {epoch}");
    for (i, ui) in u.iter().enumerate() {
        say!("  u[{i}] = {ui:.6}");
    }
    Ok(())
}

pub fn cmd_eval(
    common: &CommonArgs,
    checkpoint: &Path,
    out: Option<&Path>,
    baseline: Option<&Path>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let root = data_root(common);
    let sidecar = cfg
        .data
        .test_labels
        .as_deref()
        .ok_or_else(|| Error::Usage("config names no test labels; cannot evaluate".into()))?;
    let test = idx::load_with_sidecar(
        &resolve(&root, &cfg.data.test_images),
        &resolve(&root, sidecar),
    )?;
    let ckpt = crate::checkpoint::load_checkpoint(checkpoint)?;
    let report = evaluate(&ckpt.model, &test)?;
    say!("eval: accuracy {:.4} on {} images", report.accuracy, report.n);
    if let Some(base_path) = baseline {
        let text = std::fs::read_to_string(base_path)
            .map_err(|e| Error::io(base_path.display().to_string(), e))?;
        let base: EvalReport = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", base_path.display())))?;
        say!("eval: delta vs baseline {:+.4}", compare(&report, &base)?);
    }
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(())
}

pub fn cmd_report(out: &Path) -> Result<()> {
    let log_file = log_path(out);
    let text = std::fs::read_to_string(&log_file)
        .map_err(|e| Error::io(log_file.display().to_string(), e))?;
    let log = TrainingLog::from_csv(&text)?;
    let m = log.measurement_vectors();
    let u = combine(&m.v, &m.w)?;
    let mut csv = String::from("epoch,v,w,u,loss_main");
    for name in &log.task_names {
        csv.push_str(&format!(",loss_{name}"));
    }
    csv.push('\n');
    for (r, ui) in log.records.iter().zip(&u) {
        csv.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e}",
            r.epoch, r.v, r.w, ui, r.loss_main
        ));
        for l in &r.task_losses {
            csv.push_str(&format!(",{l:.17e}"));
        }
        csv.push('\n');
    }
    let path = out.join("report.csv");
    std::fs::write(&path, &csv).map_err(|e| Error::io(path.display().to_string(), e))?;
    say!("report: wrote {}", path.display());
    Ok(())
}

/// Dispatches a parsed command; the binary maps the error onto exit codes.
pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { common } => cmd_synth(common),
        Command::Train {
            common,
            tasks,
            mode,
            epochs,
            out,
        } => cmd_train(common, tasks.as_deref(), mode.as_deref(), *epochs, out),
        Command::Select { out } => cmd_select(out),
        Command::Eval {
            common,
            checkpoint,
            out,
            baseline,
        } => cmd_eval(common, checkpoint, out.as_deref(), baseline.as_deref()),
        Command::Report { out } => cmd_report(out),
    }
}

/// 0 ok, 1 divergence, 2 usage/config/anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. } => 1,
        _ => 2,
    }
}
