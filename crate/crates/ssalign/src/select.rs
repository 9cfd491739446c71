//! Early stopping and run selection without target labels: the Euclidean
//! distance between mean source and target features (MMD under the linear
//! kernel), combined with source validation error as u = v/min(v) + w/min(w),
//! stopped at argmin u. The distance is measured, never trained against.

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Per-epoch measurement vectors of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasurementVectors {
    /// Mean feature distance D(S', T') per epoch.
    pub v: Vec<f64>,
    /// Main-task error on the labeled source validation set per epoch.
    pub w: Vec<f64>,
}

/// Mean of features over a set, accumulated in f64 and chunked so arbitrarily
/// large sets evaluate in bounded memory.
fn mean_features(model: &ModelParams<f32>, images: &Tensor<f32>, chunk: usize) -> Result<Vec<f64>> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::Usage("mean_distance needs a nonempty set".into()));
    }
    let mut sum: Option<Vec<f64>> = None;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let feats = model.features(&images.gather_rows(&idx)?)?;
        let d = feats.shape()[1];
        let acc = sum.get_or_insert_with(|| vec![0.0; d]);
        for row in feats.data().chunks(d) {
            for (a, &x) in acc.iter_mut().zip(row) {
                *a += x as f64;
            }
        }
        start = end;
    }
    let mut mean = sum.unwrap();
    for v in mean.iter_mut() {
        *v /= n as f64;
    }
    Ok(mean)
}

/// Distance between the mean source and target features in eval mode; no
/// gradients are recorded anywhere on this path.
pub fn mean_distance(
    model: &ModelParams<f32>,
    source_images: &Tensor<f32>,
    target_images: &Tensor<f32>,
) -> Result<f64> {
    let ms = mean_features(model, source_images, 256)?;
    let mt = mean_features(model, target_images, 256)?;
    Ok(ms
        .iter()
        .zip(&mt)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// v / min(v) with the degenerate rule: a zero minimum is replaced by the
/// smallest positive entry, and an all-zero vector normalizes to all ones.
fn normalize(xs: &[f64]) -> Vec<f64> {
    let min_pos = xs
        .iter()
        .copied()
        .filter(|&x| x > 0.0)
        .fold(f64::INFINITY, f64::min);
    if min_pos.is_infinite() {
        return vec![1.0; xs.len()];
    }
    xs.iter().map(|&x| x / min_pos).collect()
}

/// u = v/min(v) + w/min(w), elementwise.
pub fn combine(v: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    if v.len() != w.len() {
        return Err(Error::Usage(format!(
            "combine: length mismatch {} vs {}",
            v.len(),
            w.len()
        )));
    }
    if v.iter().chain(w).any(|&x| x < 0.0) {
        return Err(Error::Usage("combine: entries must be nonnegative".into()));
    }
    let nv = normalize(v);
    let nw = normalize(w);
    Ok(nv.iter().zip(&nw).map(|(a, b)| a + b).collect())
}

/// Index of the minimum of u; ties resolve to the earliest epoch.
pub fn early_stop(u: &[f64]) -> Result<usize> {
    if u.is_empty() {
        return Err(Error::Usage("early_stop on empty measurement vector".into()));
    }
    let mut best = 0;
    for (i, &x) in u.iter().enumerate() {
        if x < u[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Picks the run and epoch with the smallest combined minimum, normalizing
/// within each run. Ties resolve to the first run.
pub fn select_run(runs: &[MeasurementVectors]) -> Result<(usize, usize)> {
    if runs.is_empty() {
        return Err(Error::Usage("select_run needs at least one run".into()));
    }
    let mut best: Option<(usize, usize, f64)> = None;
    for (ri, run) in runs.iter().enumerate() {
        let u = combine(&run.v, &run.w)?;
        let e = early_stop(&u)?;
        let score = u[e];
        if best.map_or(true, |(_, _, s)| score < s) {
            best = Some((ri, e, score));
        }
    }
    let (ri, e, _) = best.unwrap();
    Ok((ri, e))
}

/// Selection output written by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionReport {
    pub run: usize,
    pub epoch: usize,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub u: Vec<f64>,
    pub checkpoint: Option<String>,
}
