//! Self-supervised task constructors: each task transforms a batch of images
//! and synthesizes its own labels from the transformation, with any original
//! labels discarded by construction (the constructors never see them).

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Predict the quarter-turn count as 4-way classification.
    Rotation,
    /// Predict whether the image was flipped vertically.
    VFlip,
    /// Predict which quadrant a patch was cropped from.
    Loc4,
    /// Regress the normalized crop coordinates; trained with the square loss.
    LocRegress,
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotation" => Ok(TaskKind::Rotation),
            "flip" => Ok(TaskKind::VFlip),
            "loc4" => Ok(TaskKind::Loc4),
            "loc_regress" => Ok(TaskKind::LocRegress),
            other => Err(Error::Usage(format!(
                "unknown task '{other}' (expected rotation|flip|loc4|loc_regress)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub kind: TaskKind,
    /// Patch edge in pixels, location tasks only; defaults to H/2.
    #[serde(default)]
    pub patch_size: Option<usize>,
}

impl TaskSpec {
    pub fn new(id: usize, kind: TaskKind) -> Self {
        TaskSpec {
            id,
            kind,
            patch_size: None,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            TaskKind::Rotation => 4,
            TaskKind::VFlip => 2,
            TaskKind::Loc4 => 4,
            TaskKind::LocRegress => 2,
        }
    }

    pub fn is_regression(&self) -> bool {
        self.kind == TaskKind::LocRegress
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            TaskKind::Rotation => "rotation",
            TaskKind::VFlip => "flip",
            TaskKind::Loc4 => "loc4",
            TaskKind::LocRegress => "loc_regress",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone)]
pub enum TaskLabels<T> {
    Classes(Vec<usize>),
    Coords(Vec<[T; 2]>),
}

impl<T> TaskLabels<T> {
    pub fn len(&self) -> usize {
        match self {
            TaskLabels::Classes(v) => v.len(),
            TaskLabels::Coords(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A transformed batch with synthesized labels and per-row provenance.
#[derive(Debug, Clone)]
pub struct SelfSupBatch<T> {
    pub images: Tensor<T>,
    pub labels: TaskLabels<T>,
    pub provenance: Vec<Domain>,
}

/// Whether rotation batches sample one angle per image or expand every image
/// into all four rotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    Sampled,
    ExpandAll,
}

fn image_dims<T: Scalar>(images: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Dim(format!("expected [N,C,H,W] batch, got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// `k` quarter-turns counterclockwise: one turn maps `(i, j) <- (j, n-1-i)`.
pub fn rotate90<T: Scalar>(image: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Dim(format!("rotate90 expects [C,H,W], got {s:?}")));
    }
    let k = k % 4;
    let mut cur = image.clone();
    for _ in 0..k {
        let (c, h, w) = (cur.shape()[0], cur.shape()[1], cur.shape()[2]);
        let src = cur.data();
        let mut out = vec![T::zero(); c * h * w];
        // output is [C, W, H]
        for ci in 0..c {
            for i in 0..w {
                for j in 0..h {
                    out[(ci * w + i) * h + j] = src[(ci * h + j) * w + (w - 1 - i)];
                }
            }
        }
        cur = Tensor::new(vec![c, w, h], out)?;
    }
    Ok(cur)
}

/// Reverses row order.
pub fn vflip<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Dim(format!("vflip expects [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut out = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for i in 0..h {
            out[(ci * h + i) * w..(ci * h + i + 1) * w]
                .copy_from_slice(&src[(ci * h + (h - 1 - i)) * w..(ci * h + (h - i)) * w]);
        }
    }
    Tensor::new(s.to_vec(), out)
}

fn row<T: Scalar>(images: &Tensor<T>, i: usize) -> Tensor<T> {
    let per: usize = images.shape()[1..].iter().product();
    Tensor::new(
        images.shape()[1..].to_vec(),
        images.data()[i * per..(i + 1) * per].to_vec(),
    )
    .unwrap()
}

fn stack<T: Scalar>(rows: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    let shape = rows[0].shape().to_vec();
    let mut data = Vec::with_capacity(rows.len() * rows[0].numel());
    for r in &rows {
        if r.shape() != shape.as_slice() {
            return Err(Error::Dim("stack: mismatched row shapes".into()));
        }
        data.extend_from_slice(r.data());
    }
    let mut full = vec![rows.len()];
    full.extend_from_slice(&shape);
    Tensor::new(full, data)
}

/// One rotation per image, label drawn uniformly from {0,1,2,3}; in
/// `ExpandAll` mode every image contributes all four rotations.
pub fn make_rotation_batch<T: Scalar, R: Rng>(
    images: &Tensor<T>,
    provenance: Vec<Domain>,
    mode: RotationMode,
    rng: &mut R,
) -> Result<SelfSupBatch<T>> {
    let (n, _, h, w) = image_dims(images)?;
    if h != w {
        return Err(Error::Config(format!(
            "rotation batches need square images, got {h}x{w}"
        )));
    }
    check_provenance(n, &provenance)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut prov = Vec::new();
    for i in 0..n {
        let img = row(images, i);
        match mode {
            RotationMode::Sampled => {
                let k = rng.gen_range(0..4usize);
                rows.push(rotate90(&img, k)?);
                labels.push(k);
                prov.push(provenance[i]);
            }
            RotationMode::ExpandAll => {
                for k in 0..4 {
                    rows.push(rotate90(&img, k)?);
                    labels.push(k);
                    prov.push(provenance[i]);
                }
            }
        }
    }
    Ok(SelfSupBatch {
        images: stack(rows)?,
        labels: TaskLabels::Classes(labels),
        provenance: prov,
    })
}

/// Each image flipped with probability 1/2; label 1 iff flipped.
pub fn make_flip_batch<T: Scalar, R: Rng>(
    images: &Tensor<T>,
    provenance: Vec<Domain>,
    rng: &mut R,
) -> Result<SelfSupBatch<T>> {
    let (n, _, _, _) = image_dims(images)?;
    check_provenance(n, &provenance)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let img = row(images, i);
        if rng.gen_bool(0.5) {
            rows.push(vflip(&img)?);
            labels.push(1);
        } else {
            rows.push(img);
            labels.push(0);
        }
    }
    Ok(SelfSupBatch {
        images: stack(rows)?,
        labels: TaskLabels::Classes(labels),
        provenance,
    })
}

fn crop<T: Scalar>(image: &Tensor<T>, r0: usize, c0: usize, size: usize) -> Tensor<T> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    debug_assert!(r0 + size <= h && c0 + size <= w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ci in 0..c {
        for i in 0..size {
            let base = (ci * h + r0 + i) * w + c0;
            out.extend_from_slice(&src[base..base + size]);
        }
    }
    Tensor::new(vec![c, size, size], out).unwrap()
}

/// Quadrant classification: label = 2 * row_half + col_half. The patch is
/// anchored at the quadrant corner when `patch_size` = H/2, otherwise placed
/// uniformly inside the quadrant.
pub fn make_loc4_batch<T: Scalar, R: Rng>(
    images: &Tensor<T>,
    provenance: Vec<Domain>,
    patch_size: usize,
    rng: &mut R,
) -> Result<SelfSupBatch<T>> {
    let (n, _, h, w) = image_dims(images)?;
    check_provenance(n, &provenance)?;
    if patch_size > h / 2 || patch_size > w / 2 {
        return Err(Error::Config(format!(
            "loc4 patch {patch_size} exceeds quadrant of {h}x{w} image"
        )));
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let img = row(images, i);
        let row_half = rng.gen_range(0..2usize);
        let col_half = rng.gen_range(0..2usize);
        let slack_r = h / 2 - patch_size;
        let slack_c = w / 2 - patch_size;
        let r0 = row_half * (h / 2)
            + if slack_r > 0 { rng.gen_range(0..=slack_r) } else { 0 };
        let c0 = col_half * (w / 2)
            + if slack_c > 0 { rng.gen_range(0..=slack_c) } else { 0 };
        rows.push(crop(&img, r0, c0, patch_size));
        labels.push(2 * row_half + col_half);
    }
    Ok(SelfSupBatch {
        images: stack(rows)?,
        labels: TaskLabels::Classes(labels),
        provenance,
    })
}

/// Continuous location: crop corner uniform over the valid range, target is
/// the corner normalized to [0,1]^2.
pub fn make_loc_regress_batch<T: Scalar, R: Rng>(
    images: &Tensor<T>,
    provenance: Vec<Domain>,
    patch_size: usize,
    rng: &mut R,
) -> Result<SelfSupBatch<T>> {
    let (n, _, h, w) = image_dims(images)?;
    check_provenance(n, &provenance)?;
    if patch_size >= h.min(w) {
        return Err(Error::Config(format!(
            "loc_regress patch {patch_size} must be smaller than {h}x{w} image"
        )));
    }
    let (max_r, max_c) = (h - patch_size, w - patch_size);
    let mut rows = Vec::new();
    let mut coords = Vec::new();
    for i in 0..n {
        let img = row(images, i);
        let r0 = rng.gen_range(0..=max_r);
        let c0 = rng.gen_range(0..=max_c);
        rows.push(crop(&img, r0, c0, patch_size));
        coords.push([
            T::from_usize_(r0) / T::from_usize_(max_r),
            T::from_usize_(c0) / T::from_usize_(max_c),
        ]);
    }
    Ok(SelfSupBatch {
        images: stack(rows)?,
        labels: TaskLabels::Coords(coords),
        provenance,
    })
}

fn check_provenance(n: usize, provenance: &[Domain]) -> Result<()> {
    if provenance.len() != n {
        return Err(Error::Dim(format!(
            "provenance length {} != batch size {n}",
            provenance.len()
        )));
    }
    Ok(())
}

/// Builds the batch for `spec` from raw images. The provenance rows mark
/// which domain each image came from; the constructors themselves treat both
/// domains identically.
pub fn make_task_batch<T: Scalar, R: Rng>(
    spec: &TaskSpec,
    images: &Tensor<T>,
    provenance: Vec<Domain>,
    rotation_mode: RotationMode,
    rng: &mut R,
) -> Result<SelfSupBatch<T>> {
    let (_, _, h, _) = image_dims(images)?;
    let patch = spec.patch_size.unwrap_or(h / 2);
    match spec.kind {
        TaskKind::Rotation => make_rotation_batch(images, provenance, rotation_mode, rng),
        TaskKind::VFlip => make_flip_batch(images, provenance, rng),
        TaskKind::Loc4 => make_loc4_batch(images, provenance, patch, rng),
        TaskKind::LocRegress => make_loc_regress_batch(images, provenance, patch, rng),
    }
}

/// Loss for the head output under this task: cross entropy for the
/// classification kinds, square loss for location regression.
pub fn task_loss<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &TaskSpec,
    head_output: Var,
    labels: &TaskLabels<T>,
) -> Result<Var> {
    match (spec.is_regression(), labels) {
        (false, TaskLabels::Classes(ys)) => tape.softmax_cross_entropy(head_output, ys),
        (true, TaskLabels::Coords(cs)) => {
            let mut data = Vec::with_capacity(cs.len() * 2);
            for c in cs {
                data.push(c[0]);
                data.push(c[1]);
            }
            let target = Tensor::new(vec![cs.len(), 2], data)?;
            let t = tape.constant(&target);
            tape.square_loss(head_output, t)
        }
        _ => Err(Error::Usage(format!(
            "label kind does not match task '{}'",
            spec.name()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img2x2() -> Tensor<f32> {
        Tensor::new(vec![1, 2, 2], vec![1., 2., 3., 4.]).unwrap()
    }

    #[test]
    fn rotate90_matches_stated_convention() {
        let r = rotate90(&img2x2(), 1).unwrap();
        assert_eq!(r.data(), &[2., 4., 1., 3.]);
    }

    #[test]
    fn rotate90_zero_is_identity() {
        assert_eq!(rotate90(&img2x2(), 0).unwrap().data(), img2x2().data());
    }

    #[test]
    fn four_quarter_turns_is_identity() {
        let mut img = Tensor::new(vec![1, 3, 3], (0..9).map(|v| v as f32).collect()).unwrap();
        let orig = img.clone();
        for _ in 0..4 {
            img = rotate90(&img, 1).unwrap();
        }
        assert_eq!(img.data(), orig.data());
    }

    #[test]
    fn vflip_reverses_rows_and_is_involution() {
        let f = vflip(&img2x2()).unwrap();
        assert_eq!(f.data(), &[3., 4., 1., 2.]);
        assert_eq!(vflip(&f).unwrap().data(), img2x2().data());
    }

    fn batch(n: usize, h: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = (0..n * h * h).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![n, 1, h, h], data).unwrap()
    }

    #[test]
    fn rotation_labels_roughly_uniform() {
        let images = batch(10_000, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = make_rotation_batch(
            &images,
            vec![Domain::Source; 10_000],
            RotationMode::Sampled,
            &mut rng,
        )
        .unwrap();
        let TaskLabels::Classes(ys) = &b.labels else { panic!() };
        let mut counts = [0usize; 4];
        for &y in ys {
            counts[y] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.25).abs() < 0.02, "frequency {f}");
        }
    }

    #[test]
    fn rotation_batch_reproducible_and_label_consistent() {
        let images = batch(16, 4);
        let prov = vec![Domain::Target; 16];
        let mk = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            make_rotation_batch(&images, prov.clone(), RotationMode::Sampled, &mut rng).unwrap()
        };
        let a = mk();
        let b = mk();
        assert_eq!(a.images.data(), b.images.data());
        // inverse rotation recovers the original, bit-exact
        let TaskLabels::Classes(ys) = &a.labels else { panic!() };
        for i in 0..16 {
            let rot = a.images.gather_rows(&[i]).unwrap();
            let rot = Tensor::new(rot.shape()[1..].to_vec(), rot.data().to_vec()).unwrap();
            let back = rotate90(&rot, (4 - ys[i]) % 4).unwrap();
            let orig = images.gather_rows(&[i]).unwrap();
            assert_eq!(back.data(), orig.data());
        }
    }

    #[test]
    fn expand_all_mode_quadruples_batch() {
        let images = batch(5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = make_rotation_batch(
            &images,
            vec![Domain::Source; 5],
            RotationMode::ExpandAll,
            &mut rng,
        )
        .unwrap();
        assert_eq!(b.images.shape()[0], 20);
        assert_eq!(b.provenance.len(), 20);
    }

    #[test]
    fn flip_label_zero_rows_are_untouched() {
        let images = batch(64, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = make_flip_batch(&images, vec![Domain::Source; 64], &mut rng).unwrap();
        let TaskLabels::Classes(ys) = &b.labels else { panic!() };
        let per = 16;
        for i in 0..64 {
            let got = &b.images.data()[i * per..(i + 1) * per];
            let orig = &images.data()[i * per..(i + 1) * per];
            if ys[i] == 0 {
                assert_eq!(got, orig);
            } else {
                assert_ne!(got, orig);
            }
        }
    }

    #[test]
    fn loc4_corner_patch_and_label_encoding() {
        // 4x4 image of distinct values, patch 2: quadrant (0,0) slice
        let img = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        loop {
            let b = make_loc4_batch(&img, vec![Domain::Source], 2, &mut rng).unwrap();
            let TaskLabels::Classes(ys) = &b.labels else { panic!() };
            if ys[0] == 0 {
                assert_eq!(b.images.data(), &[0., 1., 4., 5.]);
                break;
            }
        }
    }

    #[test]
    fn loc4_quadrant_frequencies_uniform() {
        let images = batch(10_000, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = make_loc4_batch(&images, vec![Domain::Source; 10_000], 2, &mut rng).unwrap();
        let TaskLabels::Classes(ys) = &b.labels else { panic!() };
        let mut counts = [0usize; 4];
        for &y in ys {
            counts[y] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.25).abs() < 0.02);
        }
    }

    #[test]
    fn loc4_patch_too_large_is_config_error() {
        let images = batch(1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert!(matches!(
            make_loc4_batch(&images, vec![Domain::Source], 3, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn loc_regress_round_trip_all_corners() {
        // every valid corner of an 8x8 image with patch 4 decodes exactly
        let h = 8usize;
        let p = 4usize;
        for r0 in 0..=(h - p) {
            for c0 in 0..=(h - p) {
                let tr = r0 as f32 / (h - p) as f32;
                let tc = c0 as f32 / (h - p) as f32;
                let back_r = (tr * (h - p) as f32).round() as usize;
                let back_c = (tc * (h - p) as f32).round() as usize;
                assert_eq!((back_r, back_c), (r0, c0));
            }
        }
        // boundary targets
        let images = batch(200, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b =
            make_loc_regress_batch(&images, vec![Domain::Source; 200], 4, &mut rng).unwrap();
        let TaskLabels::Coords(cs) = &b.labels else { panic!() };
        for c in cs {
            assert!((0.0..=1.0).contains(&c[0]) && (0.0..=1.0).contains(&c[1]));
        }
    }

    #[test]
    fn task_loss_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(&Tensor::zeros(vec![3, 4]));
        let spec = TaskSpec::new(1, TaskKind::Rotation);
        let l = task_loss(&mut tape, &spec, z, &TaskLabels::Classes(vec![0, 1, 2])).unwrap();
        assert!((tape.scalar(l) - 4.0f64.ln()).abs() < 1e-9);

        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(&Tensor::zeros(vec![3, 2]));
        let spec = TaskSpec::new(2, TaskKind::VFlip);
        let l = task_loss(&mut tape, &spec, z, &TaskLabels::Classes(vec![0, 1, 0])).unwrap();
        assert!((tape.scalar(l) - 2.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn loc_regress_perfect_prediction_zero_loss() {
        let mut tape = Tape::<f64>::new();
        let pred = Tensor::new(vec![2, 2], vec![0.25, 0.5, 1.0, 0.0]).unwrap();
        let z = tape.leaf(&pred);
        let spec = TaskSpec::new(3, TaskKind::LocRegress);
        let labels = TaskLabels::Coords(vec![[0.25, 0.5], [1.0, 0.0]]);
        let l = task_loss(&mut tape, &spec, z, &labels).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn label_kind_mismatch_is_usage_error() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(&Tensor::zeros(vec![1, 4]));
        let spec = TaskSpec::new(1, TaskKind::Rotation);
        assert!(matches!(
            task_loss(&mut tape, &spec, z, &TaskLabels::Coords(vec![[0.0, 0.0]])),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn transforms_commute_with_pixel_scaling() {
        // brightness is orthogonal to the structural transforms, bit-level
        // for an exact scale like 0.5
        let img = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f32 / 16.0).collect()).unwrap();
        let scaled = Tensor::new(
            vec![1, 4, 4],
            img.data().iter().map(|&v| 0.5 * v).collect(),
        )
        .unwrap();
        for k in 0..4 {
            let a = rotate90(&scaled, k).unwrap();
            let b = rotate90(&img, k).unwrap();
            let b: Vec<f32> = b.data().iter().map(|&v| 0.5 * v).collect();
            assert_eq!(a.data(), &b[..]);
        }
        let a = vflip(&scaled).unwrap();
        let b: Vec<f32> = vflip(&img).unwrap().data().iter().map(|&v| 0.5 * v).collect();
        assert_eq!(a.data(), &b[..]);
        let a = crop(&scaled, 1, 2, 2);
        let b: Vec<f32> = crop(&img, 1, 2, 2).data().iter().map(|&v| 0.5 * v).collect();
        assert_eq!(a.data(), &b[..]);
    }
}
