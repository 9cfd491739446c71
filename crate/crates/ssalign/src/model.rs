//! The shared encoder and its task heads.
//!
//! The encoder is a small conv net: per stage a 3x3 conv (pad 1) -> ReLU ->
//! 2x2 max pool, with an optional pre-activation residual block per stage,
//! finished by global average pooling. Every head is a single linear layer on
//! the pooled features; head 0 is the main classifier and is the only head
//! consulted at prediction time.

use crate::error::{Error, Result};
use crate::tape::{BnStats, Tape, Var};
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const FEATURE_DIM_RANGE: (usize, usize) = (64, 512);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Channel width per conv stage; each stage halves the spatial extents.
    pub widths: Vec<usize>,
    /// Output dimension of the encoder; must equal the last stage width
    /// because features are produced by global average pooling.
    pub feature_dim: usize,
    /// Adds a pre-activation residual block (with batch norm) per stage.
    #[serde(default)]
    pub residual: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.widths.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        if self.feature_dim != *self.widths.last().unwrap() {
            return Err(Error::Config(format!(
                "feature_dim {} must equal the last stage width {}",
                self.feature_dim,
                self.widths.last().unwrap()
            )));
        }
        let mut warnings = Vec::new();
        if self.feature_dim < FEATURE_DIM_RANGE.0 || self.feature_dim > FEATURE_DIM_RANGE.1 {
            warnings.push(format!(
                "feature_dim {} is outside the usual range [{}, {}]",
                self.feature_dim, FEATURE_DIM_RANGE.0, FEATURE_DIM_RANGE.1
            ));
        }
        Ok(warnings)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub task_id: usize,
    pub output_dim: usize,
    pub kind: HeadKind,
}

#[derive(Debug, Clone, PartialEq)]
struct ConvLayer<T> {
    w: Tensor<T>,
    b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct BnLayer<T> {
    scale: Tensor<T>,
    shift: Tensor<T>,
    stats: BnStats<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct ResBlock<T> {
    bn1: BnLayer<T>,
    conv1: ConvLayer<T>,
    bn2: BnLayer<T>,
    conv2: ConvLayer<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct Stage<T> {
    conv: ConvLayer<T>,
    bn: BnLayer<T>,
    res: Option<ResBlock<T>>,
}

#[derive(Debug, Clone, PartialEq)]
struct Head<T> {
    cfg: HeadConfig,
    w: Tensor<T>,
    b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    encoder_cfg: EncoderConfig,
    stages: Vec<Stage<T>>,
    heads: Vec<Head<T>>,
}

/// Tape vars for every parameter, in the model's flat parameter order.
pub struct ModelVars {
    vars: Vec<Var>,
}

impl ModelVars {
    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn uniform_init<T: Scalar, R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| T::from_f64_(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn conv_layer<T: Scalar, R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> ConvLayer<T> {
    ConvLayer {
        w: uniform_init(vec![c_out, c_in, 3, 3], c_in * 9, rng),
        b: Tensor::zeros(vec![c_out]),
    }
}

fn bn_layer<T: Scalar>(c: usize) -> BnLayer<T> {
    BnLayer {
        scale: Tensor::filled(vec![c], T::one()),
        shift: Tensor::zeros(vec![c]),
        stats: BnStats::new(c),
    }
}

/// Builds a model deterministically from the seed. Head order follows the
/// given list; exactly one head must have task id 0 (the main classifier).
pub fn init_model<T: Scalar>(
    encoder_cfg: &EncoderConfig,
    heads: &[HeadConfig],
    seed: u64,
) -> Result<ModelParams<T>> {
    for warning in encoder_cfg.validate()? {
        eprintln!("warning: {warning}");
    }
    let mut seen = std::collections::HashSet::new();
    for h in heads {
        if !seen.insert(h.task_id) {
            return Err(Error::Config(format!("duplicate head task id {}", h.task_id)));
        }
    }
    if !seen.contains(&0) {
        return Err(Error::Config("main head (task id 0) is required".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stages = Vec::new();
    let mut c_in = encoder_cfg.in_channels;
    for &width in &encoder_cfg.widths {
        let conv = conv_layer(c_in, width, &mut rng);
        let res = if encoder_cfg.residual {
            Some(ResBlock {
                bn1: bn_layer(width),
                conv1: conv_layer(width, width, &mut rng),
                bn2: bn_layer(width),
                conv2: conv_layer(width, width, &mut rng),
            })
        } else {
            None
        };
        stages.push(Stage {
            conv,
            bn: bn_layer(width),
            res,
        });
        c_in = width;
    }
    let d = encoder_cfg.feature_dim;
    let heads = heads
        .iter()
        .map(|cfg| Head {
            cfg: cfg.clone(),
            w: uniform_init(vec![cfg.output_dim, d], d, &mut rng),
            b: Tensor::zeros(vec![cfg.output_dim]),
        })
        .collect();
    Ok(ModelParams {
        encoder_cfg: encoder_cfg.clone(),
        stages,
        heads,
    })
}

impl<T: Scalar> ModelParams<T> {
    pub fn encoder_cfg(&self) -> &EncoderConfig {
        &self.encoder_cfg
    }

    pub fn head_cfgs(&self) -> Vec<HeadConfig> {
        self.heads.iter().map(|h| h.cfg.clone()).collect()
    }

    pub fn head_cfg(&self, task_id: usize) -> Result<&HeadConfig> {
        self.heads
            .iter()
            .find(|h| h.cfg.task_id == task_id)
            .map(|h| &h.cfg)
            .ok_or_else(|| Error::Usage(format!("no head registered for task {task_id}")))
    }

    /// Drops the self-supervised heads, keeping only the main classifier.
    pub fn discard_selfsup_heads(&mut self) {
        self.heads.retain(|h| h.cfg.task_id == 0);
    }

    /// Flat view of all trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for s in &self.stages {
            out.push(&s.conv.w);
            out.push(&s.conv.b);
            out.push(&s.bn.scale);
            out.push(&s.bn.shift);
            if let Some(r) = &s.res {
                out.push(&r.bn1.scale);
                out.push(&r.bn1.shift);
                out.push(&r.conv1.w);
                out.push(&r.conv1.b);
                out.push(&r.bn2.scale);
                out.push(&r.bn2.shift);
                out.push(&r.conv2.w);
                out.push(&r.conv2.b);
            }
        }
        for h in &self.heads {
            out.push(&h.w);
            out.push(&h.b);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.conv.w);
            out.push(&mut s.conv.b);
            out.push(&mut s.bn.scale);
            out.push(&mut s.bn.shift);
            if let Some(r) = &mut s.res {
                out.push(&mut r.bn1.scale);
                out.push(&mut r.bn1.shift);
                out.push(&mut r.conv1.w);
                out.push(&mut r.conv1.b);
                out.push(&mut r.bn2.scale);
                out.push(&mut r.bn2.shift);
                out.push(&mut r.conv2.w);
                out.push(&mut r.conv2.b);
            }
        }
        for h in &mut self.heads {
            out.push(&mut h.w);
            out.push(&mut h.b);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().len()
    }

    pub fn scalar_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Index of a head's weight in the flat parameter order, for gradient
    /// connectivity checks.
    pub fn head_param_indices(&self, task_id: usize) -> Result<(usize, usize)> {
        let mut idx = 0;
        for s in &self.stages {
            idx += 4;
            if s.res.is_some() {
                idx += 8;
            }
        }
        for h in &self.heads {
            if h.cfg.task_id == task_id {
                return Ok((idx, idx + 1));
            }
            idx += 2;
        }
        Err(Error::Usage(format!("no head registered for task {task_id}")))
    }

    /// Number of encoder parameters in the flat order (heads follow).
    pub fn encoder_param_count(&self) -> usize {
        let mut idx = 0;
        for s in &self.stages {
            idx += 4;
            if s.res.is_some() {
                idx += 8;
            }
        }
        idx
    }

    /// Registers every parameter as a tracked leaf on the tape.
    pub fn register(&self, tape: &mut Tape<T>) -> ModelVars {
        let vars = self.params().into_iter().map(|p| tape.leaf(p)).collect();
        ModelVars { vars }
    }

    /// Runs the encoder on a registered input var. Train mode normalizes by
    /// batch moments and updates the running estimates; eval mode applies the
    /// running estimates.
    pub fn encode_on(
        &mut self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        images: Var,
        mode: Mode,
    ) -> Result<Var> {
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != self.encoder_cfg.in_channels {
            return Err(Error::Dim(format!(
                "encoder expects [N, {}, H, W] input, got {shape:?}",
                self.encoder_cfg.in_channels
            )));
        }
        let train = mode == Mode::Train;
        let mut x = images;
        let mut vi = 0;
        for s in &mut self.stages {
            let (w, b) = (vars.vars[vi], vars.vars[vi + 1]);
            let (bns, bnb) = (vars.vars[vi + 2], vars.vars[vi + 3]);
            vi += 4;
            x = tape.conv2d(x, w, b, 1, 1)?;
            x = tape.batch_norm2d(x, bns, bnb, &mut s.bn.stats, train)?;
            x = tape.relu(x)?;
            if let Some(r) = &mut s.res {
                let (bn1s, bn1b) = (vars.vars[vi], vars.vars[vi + 1]);
                let (c1w, c1b) = (vars.vars[vi + 2], vars.vars[vi + 3]);
                let (bn2s, bn2b) = (vars.vars[vi + 4], vars.vars[vi + 5]);
                let (c2w, c2b) = (vars.vars[vi + 6], vars.vars[vi + 7]);
                vi += 8;
                let skip = x;
                let mut t = tape.batch_norm2d(x, bn1s, bn1b, &mut r.bn1.stats, train)?;
                t = tape.relu(t)?;
                t = tape.conv2d(t, c1w, c1b, 1, 1)?;
                t = tape.batch_norm2d(t, bn2s, bn2b, &mut r.bn2.stats, train)?;
                t = tape.relu(t)?;
                t = tape.conv2d(t, c2w, c2b, 1, 1)?;
                x = tape.add(t, skip)?;
            }
            x = tape.max_pool2(x)?;
        }
        tape.global_avg_pool(x)
    }

    /// Applies head `task_id` to already-computed features.
    pub fn head_on(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        task_id: usize,
        features: Var,
    ) -> Result<Var> {
        let mut vi = self.encoder_param_count();
        for h in &self.heads {
            if h.cfg.task_id == task_id {
                return tape.linear(features, vars.vars[vi], vars.vars[vi + 1]);
            }
            vi += 2;
        }
        Err(Error::Usage(format!("no head registered for task {task_id}")))
    }

    /// Moves gradients from the tape into the parameters' accumulators.
    /// Returns the flat indices of parameters that received a gradient.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, vars: &ModelVars) -> Vec<usize> {
        let mut touched = Vec::new();
        for (i, p) in self.params_mut().into_iter().enumerate() {
            if let Some(g) = tape.grad(vars.vars[i]) {
                p.accumulate_grad(g);
                touched.push(i);
            }
        }
        touched
    }

    pub fn clear_grads(&mut self) {
        for p in self.params_mut() {
            p.clear_grad();
        }
    }

    /// Eval-mode features for a batch of images; no gradients recorded.
    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        // running stats are read, not written, in eval mode
        let mut me = self.clone();
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let vars = me.register(&mut tape);
        let f = me.encode_on(&mut tape, &vars, x, Mode::Eval)?;
        Ok(tape.value(f))
    }

    /// Eval-mode logits of one head.
    pub fn head_logits(&self, images: &Tensor<T>, task_id: usize) -> Result<Tensor<T>> {
        let mut me = self.clone();
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let vars = me.register(&mut tape);
        let f = me.encode_on(&mut tape, &vars, x, Mode::Eval)?;
        let z = me.head_on(&mut tape, &vars, task_id, f)?;
        Ok(tape.value(z))
    }

    /// Argmax of the main head; self-supervised heads are not consulted.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        self.head_cfg(0)?;
        let n = images.shape()[0];
        let chunk = 256;
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let batch = images.gather_rows(&idx)?;
            let logits = self.head_logits(&batch, 0)?;
            let k = logits.shape()[1];
            for row in logits.data().chunks(k) {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                out.push(best);
            }
            start = end;
        }
        Ok(out)
    }
}

// checkpoint serialization needs raw access to running stats
impl<T: Scalar> ModelParams<T> {
    pub(crate) fn bn_stats(&self) -> Vec<&BnStats<T>> {
        let mut out = Vec::new();
        for s in &self.stages {
            out.push(&s.bn.stats);
            if let Some(r) = &s.res {
                out.push(&r.bn1.stats);
                out.push(&r.bn2.stats);
            }
        }
        out
    }

    pub(crate) fn bn_stats_mut(&mut self) -> Vec<&mut BnStats<T>> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.bn.stats);
            if let Some(r) = &mut s.res {
                out.push(&mut r.bn1.stats);
                out.push(&mut r.bn2.stats);
            }
        }
        out
    }
}
