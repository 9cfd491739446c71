//! Joint training: the main classifier sees labeled source batches only,
//! the self-supervised heads see balanced half-source half-target batches,
//! and every loss backpropagates into the shared encoder. Two step orders
//! are supported: a round-robin over the tasks (one optimizer step each) or
//! a single step on the summed loss.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{balanced_batches, plain_batches, DomainPair};
use crate::error::{Error, Result};
use crate::model::{init_model, EncoderConfig, HeadConfig, HeadKind, Mode, ModelParams};
use crate::optim::OptimizerState;
use crate::select::{mean_distance, MeasurementVectors};
use crate::selfsup::{make_task_batch, task_loss, Domain, RotationMode, TaskSpec};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// Each task takes its own optimizer step, then the main task takes one.
    PerTaskLoop,
    /// One step on the sum of all losses.
    JointStep,
}

impl FromStr for StepMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_task_loop" => Ok(StepMode::PerTaskLoop),
            "joint_step" => Ok(StepMode::JointStep),
            other => Err(Error::Usage(format!(
                "unknown step mode '{other}' (expected per_task_loop or joint_step)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub tasks: Vec<TaskSpec>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// (epoch, factor) pairs; the rate is multiplied by each factor from its
    /// epoch onward.
    pub milestones: Vec<(usize, f32)>,
    pub step_mode: StepMode,
    pub rotation_mode: RotationMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder: EncoderConfig {
                in_channels: 1,
                widths: vec![8, 16, 64],
                feature_dim: 64,
                residual: false,
            },
            tasks: vec![TaskSpec::new(1, crate::selfsup::TaskKind::Rotation)],
            epochs: 30,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![(15, 0.1), (23, 0.1)],
            step_mode: StepMode::PerTaskLoop,
            rotation_mode: RotationMode::Sampled,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch size must be even and positive, got {}",
                self.batch_size
            )));
        }
        let mut ids: Vec<usize> = self.tasks.iter().map(|t| t.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.tasks.len() || ids.contains(&0) {
            return Err(Error::Config(
                "task ids must be distinct and nonzero (0 is the main head)".into(),
            ));
        }
        Ok(())
    }

    /// Head layout implied by this config: the main classifier plus one head
    /// per self-supervised task.
    pub fn heads(&self, num_classes: usize) -> Vec<HeadConfig> {
        let mut heads = vec![HeadConfig {
            task_id: 0,
            output_dim: num_classes,
            kind: HeadKind::Classification,
        }];
        for t in &self.tasks {
            heads.push(HeadConfig {
                task_id: t.id,
                output_dim: t.output_dim(),
                kind: if t.is_regression() {
                    HeadKind::Regression
                } else {
                    HeadKind::Classification
                },
            });
        }
        heads
    }
}

/// Stream ids for the per-epoch RNG derivation. Every random draw in epoch e
/// comes from a generator seeded by (seed, e, stream), so a run resumed from
/// any checkpoint replays the remaining epochs bit for bit.
const STREAM_MAIN_BATCHES: u64 = 0;
const STREAM_BALANCED_BATCHES: u64 = 1;
const STREAM_TASK_BASE: u64 = 16;

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    // splitmix-style mixing so nearby (epoch, stream) pairs decorrelate
    let mut z = seed
        .wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn concat_rows(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::Dim(format!(
            "cannot stack {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

/// Source index batches a task-free (K = 0) run draws in `epoch`, in step
/// order; exposed so reference implementations can replay such a run step
/// for step.
pub fn supervised_index_batches(cfg: &TrainConfig, n_source: usize, epoch: usize) -> Vec<Vec<usize>> {
    let slots = n_source.div_ceil(cfg.batch_size);
    let mut rng = epoch_rng(cfg.seed, epoch, STREAM_MAIN_BATCHES);
    plain_batches(n_source, cfg.batch_size, slots, rand::Rng::gen(&mut rng))
}

/// Mean losses observed over one epoch, in config task order.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub loss_main: f64,
    pub task_losses: Vec<f64>,
    pub steps: usize,
}

/// One row of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub v: f64,
    pub w: f64,
    pub lr: f32,
    pub loss_main: f64,
    pub task_losses: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub task_names: Vec<String>,
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,v,w,lr,loss_main");
        for name in &self.task_names {
            out.push_str(&format!(",loss_{name}"));
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.9e},{:.17e}",
                r.epoch, r.v, r.w, r.lr, r.loss_main
            ));
            for l in &r.task_losses {
                out.push_str(&format!(",{l:.17e}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<TrainingLog> {
        let bad = |m: &str| Error::Format(format!("training log: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file"))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 5 || cols[..5] != ["epoch", "v", "w", "lr", "loss_main"] {
            return Err(bad("unexpected header"));
        }
        let task_names: Vec<String> = cols[5..]
            .iter()
            .map(|c| {
                c.strip_prefix("loss_")
                    .map(str::to_string)
                    .ok_or_else(|| bad("task columns must be named loss_<task>"))
            })
            .collect::<Result<_>>()?;
        let mut records = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols.len() {
                return Err(bad("row width does not match header"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            records.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad("bad epoch"))?,
                v: num(f[1])?,
                w: num(f[2])?,
                lr: num(f[3])? as f32,
                loss_main: num(f[4])?,
                task_losses: f[5..].iter().map(|s| num(s)).collect::<Result<_>>()?,
            });
        }
        Ok(TrainingLog { task_names, records })
    }

    pub fn measurement_vectors(&self) -> MeasurementVectors {
        MeasurementVectors {
            v: self.records.iter().map(|r| r.v).collect(),
            w: self.records.iter().map(|r| r.w).collect(),
        }
    }
}

/// Fraction of source validation images the main head mispredicts.
pub fn source_val_error(model: &ModelParams<f32>, data: &DomainPair) -> Result<f64> {
    let preds = model.predict(&data.source_val.images)?;
    let wrong = preds
        .iter()
        .zip(&data.source_val.labels)
        .filter(|(p, y)| p != y)
        .count();
    Ok(wrong as f64 / preds.len().max(1) as f64)
}

fn finite_or_diverged(loss: f32, epoch: usize, step: usize, context: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss as f64)
    } else {
        Err(Error::Divergence {
            epoch,
            step,
            context: context.to_string(),
        })
    }
}

/// Applies one optimizer step to exactly the parameters that received a
/// gradient. Self-supervised steps therefore leave the main head untouched
/// (including its weight decay), and vice versa.
fn step_touched(
    model: &mut ModelParams<f32>,
    opt: &mut OptimizerState<f32>,
    touched: &[usize],
) -> Result<()> {
    let mut pairs: Vec<(usize, &mut Tensor<f32>)> = model
        .params_mut()
        .into_iter()
        .enumerate()
        .filter(|(i, _)| touched.binary_search(i).is_ok())
        .collect();
    opt.step(&mut pairs)
}

/// Runs one epoch of updates. The caller is responsible for `set_epoch` on
/// the optimizer (done by `fit`).
pub fn train_epoch(
    model: &mut ModelParams<f32>,
    opt: &mut OptimizerState<f32>,
    cfg: &TrainConfig,
    data: &DomainPair,
    epoch: usize,
) -> Result<EpochStats> {
    let bs = cfg.batch_size;
    let n_source = data.source_train.len();
    let n_target = data.target_train.len();
    let slots = if cfg.tasks.is_empty() {
        n_source.div_ceil(bs)
    } else {
        n_source.max(n_target).div_ceil(bs / 2)
    };
    let mixed = if cfg.tasks.is_empty() {
        Vec::new()
    } else {
        let mut rng = epoch_rng(cfg.seed, epoch, STREAM_BALANCED_BATCHES);
        balanced_batches(n_source, n_target, bs, rand::Rng::gen(&mut rng))?
    };
    let main = {
        let mut rng = epoch_rng(cfg.seed, epoch, STREAM_MAIN_BATCHES);
        plain_batches(n_source, bs, slots, rand::Rng::gen(&mut rng))
    };
    let mut task_rngs: Vec<ChaCha8Rng> = cfg
        .tasks
        .iter()
        .map(|t| epoch_rng(cfg.seed, epoch, STREAM_TASK_BASE + t.id as u64))
        .collect();

    let mut sum_main = 0.0;
    let mut sum_task = vec![0.0; cfg.tasks.len()];
    for slot in 0..slots {
        let main_images = data.source_train.images.gather_rows(&main[slot])?;
        let main_labels: Vec<usize> = main[slot]
            .iter()
            .map(|&i| data.source_train.labels[i])
            .collect();
        let mixed_images = if cfg.tasks.is_empty() {
            None
        } else {
            let b = &mixed[slot];
            let s = data.source_train.images.gather_rows(&b.source)?;
            let t = data.target_train.images.gather_rows(&b.target)?;
            Some((concat_rows(&s, &t)?, b.source.len(), b.target.len()))
        };
        let provenance = |ns: usize, nt: usize| {
            let mut p = vec![Domain::Source; ns];
            p.extend(std::iter::repeat(Domain::Target).take(nt));
            p
        };

        match cfg.step_mode {
            StepMode::PerTaskLoop => {
                for (k, spec) in cfg.tasks.iter().enumerate() {
                    let (imgs, ns, nt) = mixed_images.as_ref().unwrap();
                    let batch = make_task_batch(
                        spec,
                        imgs,
                        provenance(*ns, *nt),
                        cfg.rotation_mode,
                        &mut task_rngs[k],
                    )?;
                    let mut tape = Tape::new();
                    let vars = model.register(&mut tape);
                    let x = tape.constant(&batch.images);
                    let f = model.encode_on(&mut tape, &vars, x, Mode::Train)?;
                    let z = model.head_on(&mut tape, &vars, spec.id, f)?;
                    let loss = task_loss(&mut tape, spec, z, &batch.labels)?;
                    sum_task[k] +=
                        finite_or_diverged(tape.scalar(loss), epoch, slot, spec.name())?;
                    tape.backward(loss)?;
                    let touched = model.accumulate_grads(&tape, &vars);
                    step_touched(model, opt, &touched)?;
                }
                let mut tape = Tape::new();
                let vars = model.register(&mut tape);
                let x = tape.constant(&main_images);
                let f = model.encode_on(&mut tape, &vars, x, Mode::Train)?;
                let z = model.head_on(&mut tape, &vars, 0, f)?;
                let loss = tape.softmax_cross_entropy(z, &main_labels)?;
                sum_main += finite_or_diverged(tape.scalar(loss), epoch, slot, "main")?;
                tape.backward(loss)?;
                let touched = model.accumulate_grads(&tape, &vars);
                step_touched(model, opt, &touched)?;
            }
            StepMode::JointStep => {
                let mut tape = Tape::new();
                let vars = model.register(&mut tape);
                let x = tape.constant(&main_images);
                let f = model.encode_on(&mut tape, &vars, x, Mode::Train)?;
                let z = model.head_on(&mut tape, &vars, 0, f)?;
                let main_loss = tape.softmax_cross_entropy(z, &main_labels)?;
                sum_main += finite_or_diverged(tape.scalar(main_loss), epoch, slot, "main")?;
                let mut total = main_loss;
                for (k, spec) in cfg.tasks.iter().enumerate() {
                    let (imgs, ns, nt) = mixed_images.as_ref().unwrap();
                    let batch = make_task_batch(
                        spec,
                        imgs,
                        provenance(*ns, *nt),
                        cfg.rotation_mode,
                        &mut task_rngs[k],
                    )?;
                    let xb = tape.constant(&batch.images);
                    let fb = model.encode_on(&mut tape, &vars, xb, Mode::Train)?;
                    let zb = model.head_on(&mut tape, &vars, spec.id, fb)?;
                    let l = task_loss(&mut tape, spec, zb, &batch.labels)?;
                    sum_task[k] +=
                        finite_or_diverged(tape.scalar(l), epoch, slot, spec.name())?;
                    total = tape.add(total, l)?;
                }
                tape.backward(total)?;
                let touched = model.accumulate_grads(&tape, &vars);
                step_touched(model, opt, &touched)?;
            }
        }
    }
    Ok(EpochStats {
        loss_main: sum_main / slots as f64,
        task_losses: sum_task.iter().map(|s| s / slots as f64).collect(),
        steps: slots,
    })
}

fn checkpoint_path(out: &Path, completed_epochs: usize) -> PathBuf {
    out.join(format!("ckpt_{completed_epochs:03}.bin"))
}

pub fn log_path(out: &Path) -> PathBuf {
    out.join("train_log.csv")
}

/// Trains for `cfg.epochs` epochs, measuring the feature distance v and the
/// source validation error w after each one. With an output directory, every
/// epoch writes a checkpoint (with optimizer state) and rewrites the CSV log,
/// and training resumes from the latest checkpoint found there.
pub fn fit(
    cfg: &TrainConfig,
    data: &DomainPair,
    out: Option<&Path>,
) -> Result<(ModelParams<f32>, TrainingLog)> {
    cfg.validate()?;
    let num_classes = data.source_train.num_classes;
    let heads = cfg.heads(num_classes);

    let mut log = TrainingLog {
        task_names: cfg.tasks.iter().map(|t| t.name().to_string()).collect(),
        records: Vec::new(),
    };
    let mut model;
    let mut opt;
    let mut start = 0;

    let resume = out.and_then(|dir| latest_checkpoint(dir, cfg.epochs));
    if let Some((path, completed)) = resume {
        let ckpt = load_checkpoint(&path)?;
        if ckpt.model.head_cfgs() != heads || ckpt.model.encoder_cfg() != &cfg.encoder {
            return Err(Error::Config(format!(
                "checkpoint {} does not match the configured model",
                path.display()
            )));
        }
        model = ckpt.model;
        opt = OptimizerState::new(
            cfg.lr,
            cfg.momentum,
            cfg.weight_decay,
            cfg.milestones.clone(),
            model.param_count(),
        )?;
        if let Some(bufs) = ckpt.opt_buffers {
            opt.restore_buffers(bufs)?;
        }
        start = completed;
        let existing = std::fs::read_to_string(log_path(out.unwrap()))
            .map_err(|e| Error::io(log_path(out.unwrap()).display().to_string(), e))?;
        let prior = TrainingLog::from_csv(&existing)?;
        if prior.task_names != log.task_names || prior.records.len() < completed {
            return Err(Error::Consistency(
                "training log does not match the checkpoint being resumed".into(),
            ));
        }
        log.records = prior.records[..completed].to_vec();
    } else {
        model = init_model(&cfg.encoder, &heads, cfg.seed)?;
        opt = OptimizerState::new(
            cfg.lr,
            cfg.momentum,
            cfg.weight_decay,
            cfg.milestones.clone(),
            model.param_count(),
        )?;
    }

    for epoch in start..cfg.epochs {
        opt.set_epoch(epoch);
        let stats = train_epoch(&mut model, &mut opt, cfg, data, epoch)?;
        let v = mean_distance(
            &model,
            &data.source_val_unlabeled.images,
            &data.target_val.images,
        )?;
        let w = source_val_error(&model, data)?;
        if !v.is_finite() || !w.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: stats.steps,
                context: "epoch measurement".into(),
            });
        }
        log.records.push(EpochRecord {
            epoch,
            v,
            w,
            lr: opt.lr(),
            loss_main: stats.loss_main,
            task_losses: stats.task_losses,
        });
        if let Some(dir) = out {
            save_checkpoint(&checkpoint_path(dir, epoch + 1), &model, epoch + 1, Some(&opt))?;
            write_atomic(&log_path(dir), log.to_csv().as_bytes())?;
        }
    }
    Ok((model, log))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let ctx = |e| Error::io(path.display().to_string(), e);
    let mut f = std::fs::File::create(&tmp).map_err(ctx)?;
    f.write_all(bytes).map_err(ctx)?;
    std::fs::rename(&tmp, path).map_err(ctx)?;
    Ok(())
}

/// Newest checkpoint in `dir` with at most `max_epochs` completed epochs.
fn latest_checkpoint(dir: &Path, max_epochs: usize) -> Option<(PathBuf, usize)> {
    let mut best: Option<(PathBuf, usize)> = None;
    for e in 1..=max_epochs {
        let p = checkpoint_path(dir, e);
        if p.is_file() {
            best = Some((p, e));
        }
    }
    best
}
