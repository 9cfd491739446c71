//! Dataset handling: labeled/unlabeled sets, synthetic domain shifts,
//! deterministic splits, and the balanced half/half batch sampler.
//!
//! Target-set evaluation labels live in a private sidecar. Nothing on the
//! training path takes a sidecar or a labeled target set; only the eval
//! module reads it (via a crate-internal accessor).

pub mod idx;
pub mod synth;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label {
                label: bad,
                classes: num_classes,
            });
        }
        Ok(LabeledSet {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Drops the labels, producing a training-safe unlabeled view.
    pub fn unlabeled(&self) -> UnlabeledSet {
        UnlabeledSet {
            images: self.images.clone(),
            sidecar: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    pub images: Tensor<f32>,
    sidecar: Option<Vec<usize>>,
}

impl UnlabeledSet {
    pub fn new(images: Tensor<f32>) -> Self {
        UnlabeledSet {
            images,
            sidecar: None,
        }
    }

    pub fn with_sidecar(images: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} sidecar labels",
                images.shape()[0],
                labels.len()
            )));
        }
        Ok(UnlabeledSet {
            images,
            sidecar: Some(labels),
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_sidecar(&self) -> bool {
        self.sidecar.is_some()
    }

    /// Evaluation-only label access; the training and selection paths never
    /// call this.
    pub(crate) fn sidecar(&self) -> Option<&[usize]> {
        self.sidecar.as_deref()
    }
}

/// The full source/target layout for one adaptation experiment. The held-out
/// unlabeled views S' and T' are drawn before training and stay frozen.
#[derive(Debug, Clone)]
pub struct DomainPair {
    pub source_train: LabeledSet,
    /// Labeled source validation; supplies the per-epoch error trace w.
    pub source_val: LabeledSet,
    /// S': unlabeled view of the source validation images.
    pub source_val_unlabeled: UnlabeledSet,
    pub target_train: UnlabeledSet,
    /// T': held-out unlabeled target validation.
    pub target_val: UnlabeledSet,
    /// Target test set; its labels exist only in the eval sidecar.
    pub target_test: UnlabeledSet,
}

impl DomainPair {
    /// Standard assembly: split source 90/10 labeled train/val, split target
    /// train 90/10 into train and T'.
    pub fn assemble(
        source: LabeledSet,
        target_train: UnlabeledSet,
        target_test: UnlabeledSet,
        val_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let parts = split_labeled(&source, &[1.0 - val_fraction, val_fraction], seed)?;
        let (source_train, source_val) = (parts[0].clone(), parts[1].clone());
        let tparts = split_unlabeled(&target_train, &[1.0 - val_fraction, val_fraction], seed ^ 1)?;
        let (target_train, target_val) = (tparts[0].clone(), tparts[1].clone());
        let source_val_unlabeled = source_val.unlabeled();
        Ok(DomainPair {
            source_train,
            source_val,
            source_val_unlabeled,
            target_train,
            target_val,
            target_test,
        })
    }
}

// ── synthetic domain shifts ─────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftSpec {
    /// x -> clamp(alpha * x, 0, 1)
    BrightnessScale { alpha: f32 },
    /// x -> (1 - beta) * x + beta * field(seed); the field is a smooth
    /// per-image procedural texture.
    ChannelBlend { beta: f32 },
    /// x -> clamp(x + N(0, sigma^2), 0, 1)
    AdditiveNoise { sigma: f32 },
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ShiftSpec::BrightnessScale { alpha } if alpha <= 0.0 => {
                Err(Error::Config("brightness alpha must be positive".into()))
            }
            ShiftSpec::ChannelBlend { beta } if !(0.0..=1.0).contains(&beta) => {
                Err(Error::Config("blend beta must be in [0, 1]".into()))
            }
            ShiftSpec::AdditiveNoise { sigma } if sigma < 0.0 => {
                Err(Error::Config("noise sigma must be nonnegative".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Smooth per-image field: a seeded 4x4 grid bilinearly upsampled to HxW.
fn blend_field(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    const G: usize = 4;
    let grid: Vec<f32> = (0..G * G).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut out = vec![0.0f32; h * w];
    for i in 0..h {
        let fy = i as f32 / (h - 1).max(1) as f32 * (G - 1) as f32;
        let y0 = (fy as usize).min(G - 2);
        let ty = fy - y0 as f32;
        for j in 0..w {
            let fx = j as f32 / (w - 1).max(1) as f32 * (G - 1) as f32;
            let x0 = (fx as usize).min(G - 2);
            let tx = fx - x0 as f32;
            let a = grid[y0 * G + x0] * (1.0 - tx) + grid[y0 * G + x0 + 1] * tx;
            let b = grid[(y0 + 1) * G + x0] * (1.0 - tx) + grid[(y0 + 1) * G + x0 + 1] * tx;
            out[i * w + j] = a * (1.0 - ty) + b * ty;
        }
    }
    out
}

/// Applies a pixel-level shift to every image; labels are never touched.
pub fn apply_shift(images: &Tensor<f32>, spec: &ShiftSpec, seed: u64) -> Result<Tensor<f32>> {
    spec.validate()?;
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Dim(format!("apply_shift expects [N,C,H,W], got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut data = images.data().to_vec();
    match *spec {
        ShiftSpec::BrightnessScale { alpha } => {
            for v in data.iter_mut() {
                *v = (alpha * *v).clamp(0.0, 1.0);
            }
        }
        ShiftSpec::ChannelBlend { beta } => {
            for ni in 0..n {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (ni as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let field = blend_field(h, w, &mut rng);
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for k in 0..h * w {
                        data[base + k] = (1.0 - beta) * data[base + k] + beta * field[k];
                    }
                }
            }
        }
        ShiftSpec::AdditiveNoise { sigma } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in data.iter_mut() {
                // Box-Muller
                let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
                let u2: f32 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos();
                *v = (*v + sigma * z).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(s.to_vec(), data)
}

/// Applies a list of shifts in order.
pub fn apply_shifts(images: &Tensor<f32>, specs: &[ShiftSpec], seed: u64) -> Result<Tensor<f32>> {
    let mut cur = images.clone();
    for (i, spec) in specs.iter().enumerate() {
        cur = apply_shift(&cur, spec, seed.wrapping_add(i as u64))?;
    }
    Ok(cur)
}

// ── deterministic splits ────────────────────────────────────────────

fn split_indices(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split fractions sum to {total}, not 1")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut parts = Vec::new();
    let mut start = 0usize;
    let mut cum = 0.0;
    for (i, &f) in fractions.iter().enumerate() {
        cum += f;
        let end = if i + 1 == fractions.len() {
            n
        } else {
            (cum * n as f64).round() as usize
        };
        if end <= start {
            return Err(Error::Config(format!("split part {i} would be empty")));
        }
        parts.push(order[start..end].to_vec());
        start = end;
    }
    Ok(parts)
}

pub fn split_labeled(set: &LabeledSet, fractions: &[f64], seed: u64) -> Result<Vec<LabeledSet>> {
    let parts = split_indices(set.len(), fractions, seed)?;
    parts
        .into_iter()
        .map(|idx| {
            let images = set.images.gather_rows(&idx)?;
            let labels = idx.iter().map(|&i| set.labels[i]).collect();
            LabeledSet::new(images, labels, set.num_classes)
        })
        .collect()
}

pub fn split_unlabeled(
    set: &UnlabeledSet,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<UnlabeledSet>> {
    let parts = split_indices(set.len(), fractions, seed)?;
    parts
        .into_iter()
        .map(|idx| {
            let images = set.images.gather_rows(&idx)?;
            match set.sidecar.as_ref() {
                Some(s) => {
                    UnlabeledSet::with_sidecar(images, idx.iter().map(|&i| s[i]).collect())
                }
                None => Ok(UnlabeledSet::new(images)),
            }
        })
        .collect()
}

// ── balanced half/half batches ──────────────────────────────────────

/// One balanced batch: exactly `batch_size / 2` indices from each domain.
#[derive(Debug, Clone)]
pub struct BalancedBatch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

struct IndexStream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl IndexStream {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut s = IndexStream {
            order: (0..n).collect(),
            pos: 0,
            rng,
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let v = self.order[self.pos];
        self.pos += 1;
        v
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k).map(|_| self.next()).collect()
    }
}

/// Deterministic half-source half-target batches for one epoch. Epoch length
/// covers the larger set once; the smaller set recycles through reshuffles so
/// neither domain dominates the other.
pub fn balanced_batches(
    n_source: usize,
    n_target: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<BalancedBatch>> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::Config(format!(
            "balanced batch size must be even and positive, got {batch_size}"
        )));
    }
    if n_source == 0 || n_target == 0 {
        return Err(Error::Config("balanced batches need both sets nonempty".into()));
    }
    let half = batch_size / 2;
    let n_batches = n_source.max(n_target).div_ceil(half);
    let mut src = IndexStream::new(n_source, ChaCha8Rng::seed_from_u64(seed));
    let mut tgt = IndexStream::new(n_target, ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66));
    let mut out = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        out.push(BalancedBatch {
            source: src.take(half),
            target: tgt.take(half),
        });
    }
    Ok(out)
}

/// Deterministic shuffled index batches over a single set (the labeled
/// source stream for the main-task steps).
pub fn plain_batches(n: usize, batch_size: usize, n_batches: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut stream = IndexStream::new(n, ChaCha8Rng::seed_from_u64(seed));
    (0..n_batches).map(|_| stream.take(batch_size)).collect()
}
