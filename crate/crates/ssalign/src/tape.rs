//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every forward op appends one node; `backward` replays the tape in reverse,
//! visiting each node exactly once and accumulating gradients into the slots
//! of the vars it reaches. Leaves registered with [`Tape::leaf`] are tracked;
//! [`Tape::constant`] leaves (inputs, labels-as-targets) are not, which skips
//! the wasted input-gradient work of the first conv layer.

use crate::error::{Error, Result};
use crate::tensor::{check_slice_finite, Scalar, Tensor};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Slot<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        mean: Vec<T>,
        invstd: Vec<T>,
        train: bool,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    SquareLoss {
        pred: Var,
        target: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
}

struct Node<T> {
    op: Op<T>,
    out: usize,
}

/// Running moments for batch normalization. Owned by the model, mutated by the
/// op in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

pub struct Tape<T> {
    slots: Vec<Slot<T>>,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            slots: Vec::new(),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, needs_grad: bool, op: Op<T>) -> Var {
        let idx = self.slots.len();
        self.slots.push(Slot {
            shape,
            data,
            grad: None,
            needs_grad,
        });
        self.nodes.push(Node { op, out: idx });
        Var(idx)
    }

    /// Registers a tracked leaf; its gradient is available after `backward`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    /// Registers an untracked leaf (no gradient is computed for it).
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.slots[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.slots[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.slots[v.0].shape.clone(), self.slots[v.0].data.clone()).unwrap()
    }

    /// Scalar value of a one-element var.
    pub fn scalar(&self, v: Var) -> T {
        debug_assert_eq!(self.slots[v.0].data.len(), 1);
        self.slots[v.0].data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.slots[v.0].grad.as_deref()
    }

    fn needs(&self, v: Var) -> bool {
        self.slots[v.0].needs_grad
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Dim(format!(
                "conv2d expects 4-d input and kernel, got {xs:?} and {ws:?}"
            )));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return Err(Error::Dim(format!(
                "conv2d kernel channels {wc} != input channels {c}"
            )));
        }
        if bs != [o] {
            return Err(Error::Dim(format!("conv2d bias shape {bs:?}, expected [{o}]")));
        }
        if stride == 0 {
            return Err(Error::Dim("conv2d stride must be positive".into()));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::Dim(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                wd + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        let j = oh * ow;
        let ckk = c * kh * kw;

        let mut out = vec![T::zero(); n * o * j];
        let mut colt = vec![T::zero(); j * ckk];
        {
            let xd = self.data(x);
            let wdat = self.data(w);
            let bd = self.data(b);
            for ni in 0..n {
                im2col_t(
                    &xd[ni * c * h * wd..(ni + 1) * c * h * wd],
                    c,
                    h,
                    wd,
                    kh,
                    kw,
                    stride,
                    padding,
                    oh,
                    ow,
                    &mut colt,
                );
                let out_n = &mut out[ni * o * j..(ni + 1) * o * j];
                for ji in 0..j {
                    let col_j = &colt[ji * ckk..(ji + 1) * ckk];
                    for oi in 0..o {
                        let wrow = &wdat[oi * ckk..(oi + 1) * ckk];
                        let mut acc = bd[oi];
                        for k in 0..ckk {
                            acc += wrow[k] * col_j[k];
                        }
                        out_n[oi * j + ji] = acc;
                    }
                }
            }
        }
        check_slice_finite(&out, "conv2d")?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            vec![n, o, oh, ow],
            out,
            needs,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::Dim(format!(
                "linear expects 2-d input and weight, got {xs:?} and {ws:?}"
            )));
        }
        let (n, d) = (xs[0], xs[1]);
        let (o, wd) = (ws[0], ws[1]);
        if wd != d {
            return Err(Error::Dim(format!("linear weight dim {wd} != input dim {d}")));
        }
        if bs != [o] {
            return Err(Error::Dim(format!("linear bias shape {bs:?}, expected [{o}]")));
        }
        let mut out = vec![T::zero(); n * o];
        {
            let xd = self.data(x);
            let wdat = self.data(w);
            let bd = self.data(b);
            for ni in 0..n {
                let xrow = &xd[ni * d..(ni + 1) * d];
                for oi in 0..o {
                    let wrow = &wdat[oi * d..(oi + 1) * d];
                    let mut acc = bd[oi];
                    for k in 0..d {
                        acc += xrow[k] * wrow[k];
                    }
                    out[ni * o + oi] = acc;
                }
            }
        }
        check_slice_finite(&out, "linear")?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(vec![n, o], out, needs, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out: Vec<T> = self.data(x).iter().map(|&v| v.max(T::zero())).collect();
        check_slice_finite(&out, "relu")?;
        let needs = self.needs(x);
        Ok(self.push(shape, out, needs, Op::Relu { x }))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Dim(format!("max_pool2 expects 4-d input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dim(format!(
                "max_pool2 requires even spatial extents, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        {
            let xd = self.data(x);
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    let obase = (ni * c + ci) * oh * ow;
                    for i in 0..oh {
                        for jj in 0..ow {
                            let mut best_idx = base + (2 * i) * w + 2 * jj;
                            let mut best = xd[best_idx];
                            // scan order fixes the first-occurrence tie-break
                            for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = base + (2 * i + di) * w + 2 * jj + dj;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_idx = idx;
                                }
                            }
                            out[obase + i * ow + jj] = best;
                            argmax[obase + i * ow + jj] = best_idx;
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![n, c, oh, ow], out, needs, Op::MaxPool2 { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Dim(format!(
                "global_avg_pool expects 4-d input, got {xs:?}"
            )));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let area = T::from_usize_(h * w);
        let mut out = vec![T::zero(); n * c];
        {
            let xd = self.data(x);
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    let mut acc = T::zero();
                    for k in 0..h * w {
                        acc += xd[base + k];
                    }
                    out[ni * c + ci] = acc / area;
                }
            }
        }
        check_slice_finite(&out, "global_avg_pool")?;
        let needs = self.needs(x);
        Ok(self.push(vec![n, c], out, needs, Op::GlobalAvgPool { x }))
    }

    pub fn batch_norm2d(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        stats: &mut BnStats<T>,
        train: bool,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Dim(format!("batch_norm2d expects 4-d input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(Error::Dim(format!(
                "batch_norm2d scale/shift must have shape [{c}]"
            )));
        }
        let m = n * h * w;
        if train && m < 2 {
            return Err(Error::Dim(
                "batch_norm2d train mode needs at least 2 values per channel".into(),
            ));
        }
        let eps = T::from_f64_(BN_EPS);
        let (mean, invstd) = if train {
            let xd = self.data(x);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let mf = T::from_usize_(m);
            for ci in 0..c {
                let mut acc = T::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for k in 0..h * w {
                        acc += xd[base + k];
                    }
                }
                mean[ci] = acc / mf;
            }
            for ci in 0..c {
                let mu = mean[ci];
                let mut acc = T::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for k in 0..h * w {
                        let d = xd[base + k] - mu;
                        acc += d * d;
                    }
                }
                var[ci] = acc / mf;
            }
            let mom = T::from_f64_(BN_MOMENTUM);
            for ci in 0..c {
                stats.mean[ci] = (T::one() - mom) * stats.mean[ci] + mom * mean[ci];
                stats.var[ci] = (T::one() - mom) * stats.var[ci] + mom * var[ci];
            }
            let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (mean, invstd)
        } else {
            let invstd: Vec<T> = stats
                .var
                .iter()
                .map(|&v| T::one() / (v + eps).sqrt())
                .collect();
            (stats.mean.clone(), invstd)
        };

        let mut out = vec![T::zero(); n * c * h * w];
        {
            let xd = self.data(x);
            let sc = self.data(scale);
            let sh = self.data(shift);
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    let (mu, is, g, bta) = (mean[ci], invstd[ci], sc[ci], sh[ci]);
                    for k in 0..h * w {
                        out[base + k] = g * (xd[base + k] - mu) * is + bta;
                    }
                }
            }
        }
        check_slice_finite(&out, "batch_norm2d")?;
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        Ok(self.push(
            xs,
            out,
            needs,
            Op::BatchNorm {
                x,
                scale,
                shift,
                mean,
                invstd,
                train,
            },
        ))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 {
            return Err(Error::Dim(format!("softmax_ce expects 2-d logits, got {ls:?}")));
        }
        let (n, k) = (ls[0], ls[1]);
        if labels.len() != n {
            return Err(Error::Dim(format!(
                "softmax_ce got {} labels for batch of {n}",
                labels.len()
            )));
        }
        for &y in labels {
            if y >= k {
                return Err(Error::Label { label: y, classes: k });
            }
        }
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        {
            let z = self.data(logits);
            for ni in 0..n {
                let row = &z[ni * k..(ni + 1) * k];
                let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let mut denom = T::zero();
                for ki in 0..k {
                    let e = (row[ki] - mx).exp();
                    probs[ni * k + ki] = e;
                    denom += e;
                }
                for ki in 0..k {
                    probs[ni * k + ki] /= denom;
                }
                loss += denom.ln() - (row[labels[ni]] - mx);
            }
        }
        loss = loss / T::from_usize_(n);
        check_slice_finite(&[loss], "softmax_cross_entropy")?;
        let needs = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            needs,
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn square_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let ps = self.shape(pred).to_vec();
        let ts = self.shape(target).to_vec();
        if ps != ts {
            return Err(Error::Dim(format!(
                "square_loss shape mismatch: {ps:?} vs {ts:?}"
            )));
        }
        let numel = self.data(pred).len();
        let mut loss = T::zero();
        {
            let p = self.data(pred);
            let t = self.data(target);
            for i in 0..numel {
                let d = p[i] - t[i];
                loss += d * d;
            }
        }
        loss = loss / T::from_usize_(numel);
        check_slice_finite(&[loss], "square_loss")?;
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(vec![1], vec![loss], needs, Op::SquareLoss { pred, target }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return Err(Error::Dim(format!(
                "add shape mismatch: {sa:?} vs {:?}",
                self.shape(b)
            )));
        }
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        check_slice_finite(&out, "add")?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(sa, out, needs, Op::Add { a, b }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &v in self.data(x) {
            acc += v;
        }
        check_slice_finite(&[acc], "sum")?;
        let needs = self.needs(x);
        Ok(self.push(vec![1], vec![acc], needs, Op::Sum { x }))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate into tracked
    /// slots; read them out with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.slots[loss.0].data.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.slots[loss.0].shape
            )));
        }
        self.slots[loss.0].grad = Some(vec![T::one()]);

        for i in (0..self.nodes.len()).rev() {
            let gout = match self.slots[self.nodes[i].out].grad.as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            // split borrow: nodes are read-only below, slots are mutated
            let op = &self.nodes[i].op;
            match op {
                Op::Leaf => {}
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => self.backward_conv2d(*x, *w, *b, *stride, *padding, self.nodes[i].out, &gout),
                Op::Linear { x, w, b } => self.backward_linear(*x, *w, *b, &gout),
                Op::Relu { x } => {
                    if self.needs(*x) {
                        let out_idx = self.nodes[i].out;
                        let dx: Vec<T> = self.slots[out_idx]
                            .data
                            .iter()
                            .zip(&gout)
                            .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
                            .collect();
                        self.acc_grad(*x, &dx);
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    if self.needs(*x) {
                        let mut dx = vec![T::zero(); self.slots[x.0].data.len()];
                        for (k, &src) in argmax.iter().enumerate() {
                            dx[src] += gout[k];
                        }
                        let x = *x;
                        self.acc_grad(x, &dx);
                    }
                }
                Op::GlobalAvgPool { x } => {
                    if self.needs(*x) {
                        let xs = &self.slots[x.0].shape;
                        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                        let area = T::from_usize_(h * w);
                        let mut dx = vec![T::zero(); n * c * h * w];
                        for ni in 0..n {
                            for ci in 0..c {
                                let g = gout[ni * c + ci] / area;
                                let base = (ni * c + ci) * h * w;
                                for k in 0..h * w {
                                    dx[base + k] = g;
                                }
                            }
                        }
                        let x = *x;
                        self.acc_grad(x, &dx);
                    }
                }
                Op::BatchNorm {
                    x,
                    scale,
                    shift,
                    mean,
                    invstd,
                    train,
                } => {
                    let (x, scale, shift, train) = (*x, *scale, *shift, *train);
                    let (mean, invstd) = (mean.clone(), invstd.clone());
                    self.backward_batch_norm(x, scale, shift, &mean, &invstd, train, &gout);
                }
                Op::SoftmaxCe {
                    logits,
                    probs,
                    labels,
                } => {
                    if self.needs(*logits) {
                        let g = gout[0];
                        let n = labels.len();
                        let k = probs.len() / n;
                        let nf = T::from_usize_(n);
                        let mut dl = probs.clone();
                        for ni in 0..n {
                            dl[ni * k + labels[ni]] -= T::one();
                        }
                        for v in dl.iter_mut() {
                            *v = *v * g / nf;
                        }
                        let logits = *logits;
                        self.acc_grad(logits, &dl);
                    }
                }
                Op::SquareLoss { pred, target } => {
                    let (pred, target) = (*pred, *target);
                    let numel = self.slots[pred.0].data.len();
                    let coef = gout[0] * T::from_f64_(2.0) / T::from_usize_(numel);
                    if self.needs(pred) {
                        let dp: Vec<T> = self.slots[pred.0]
                            .data
                            .iter()
                            .zip(&self.slots[target.0].data)
                            .map(|(&p, &t)| coef * (p - t))
                            .collect();
                        self.acc_grad(pred, &dp);
                    }
                    if self.needs(target) {
                        let dt: Vec<T> = self.slots[pred.0]
                            .data
                            .iter()
                            .zip(&self.slots[target.0].data)
                            .map(|(&p, &t)| coef * (t - p))
                            .collect();
                        self.acc_grad(target, &dt);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        self.acc_grad(a, &gout);
                    }
                    if self.needs(b) {
                        self.acc_grad(b, &gout);
                    }
                }
                Op::Sum { x } => {
                    if self.needs(*x) {
                        let g = gout[0];
                        let dx = vec![g; self.slots[x.0].data.len()];
                        let x = *x;
                        self.acc_grad(x, &dx);
                    }
                }
            }
        }
        Ok(())
    }

    fn acc_grad(&mut self, v: Var, delta: &[T]) {
        let slot = &mut self.slots[v.0];
        let grad = slot.grad.get_or_insert_with(|| vec![T::zero(); slot.data.len()]);
        for (a, b) in grad.iter_mut().zip(delta) {
            *a += *b;
        }
    }

    fn backward_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        out_idx: usize,
        gout: &[T],
    ) {
        let xs = self.slots[x.0].shape.clone();
        let ws = self.slots[w.0].shape.clone();
        let os = self.slots[out_idx].shape.clone();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let (oh, ow) = (os[2], os[3]);
        let j = oh * ow;
        let ckk = c * kh * kw;
        let needs_x = self.needs(x);
        let needs_w = self.needs(w);
        let needs_b = self.needs(b);

        let mut dw = if needs_w { vec![T::zero(); o * ckk] } else { Vec::new() };
        let mut db = if needs_b { vec![T::zero(); o] } else { Vec::new() };
        let mut dx = if needs_x { vec![T::zero(); n * c * h * wd] } else { Vec::new() };
        let mut colt = vec![T::zero(); j * ckk];
        let mut dcolt = vec![T::zero(); j * ckk];
        {
            let xd = &self.slots[x.0].data;
            let wdat = &self.slots[w.0].data;
            for ni in 0..n {
                let gout_n = &gout[ni * o * j..(ni + 1) * o * j];
                if needs_w {
                    im2col_t(
                        &xd[ni * c * h * wd..(ni + 1) * c * h * wd],
                        c,
                        h,
                        wd,
                        kh,
                        kw,
                        stride,
                        padding,
                        oh,
                        ow,
                        &mut colt,
                    );
                    for oi in 0..o {
                        let g_row = &gout_n[oi * j..(oi + 1) * j];
                        let dwrow = &mut dw[oi * ckk..(oi + 1) * ckk];
                        for ji in 0..j {
                            let g = g_row[ji];
                            if g != T::zero() {
                                let col_j = &colt[ji * ckk..(ji + 1) * ckk];
                                for k in 0..ckk {
                                    dwrow[k] += g * col_j[k];
                                }
                            }
                        }
                    }
                }
                if needs_b {
                    for oi in 0..o {
                        let mut acc = T::zero();
                        for ji in 0..j {
                            acc += gout_n[oi * j + ji];
                        }
                        db[oi] += acc;
                    }
                }
                if needs_x {
                    for v in dcolt.iter_mut() {
                        *v = T::zero();
                    }
                    for ji in 0..j {
                        let dcol_j = &mut dcolt[ji * ckk..(ji + 1) * ckk];
                        for oi in 0..o {
                            let g = gout_n[oi * j + ji];
                            if g != T::zero() {
                                let wrow = &wdat[oi * ckk..(oi + 1) * ckk];
                                for k in 0..ckk {
                                    dcol_j[k] += g * wrow[k];
                                }
                            }
                        }
                    }
                    col2im_t(
                        &dcolt,
                        c,
                        h,
                        wd,
                        kh,
                        kw,
                        stride,
                        padding,
                        oh,
                        ow,
                        &mut dx[ni * c * h * wd..(ni + 1) * c * h * wd],
                    );
                }
            }
        }
        if needs_w {
            self.acc_grad(w, &dw);
        }
        if needs_b {
            self.acc_grad(b, &db);
        }
        if needs_x {
            self.acc_grad(x, &dx);
        }
    }

    fn backward_linear(&mut self, x: Var, w: Var, b: Var, gout: &[T]) {
        let xs = self.slots[x.0].shape.clone();
        let ws = self.slots[w.0].shape.clone();
        let (n, d) = (xs[0], xs[1]);
        let o = ws[0];
        let needs_x = self.needs(x);
        let needs_w = self.needs(w);
        let needs_b = self.needs(b);
        let mut dw = if needs_w { vec![T::zero(); o * d] } else { Vec::new() };
        let mut db = if needs_b { vec![T::zero(); o] } else { Vec::new() };
        let mut dx = if needs_x { vec![T::zero(); n * d] } else { Vec::new() };
        {
            let xd = &self.slots[x.0].data;
            let wdat = &self.slots[w.0].data;
            for ni in 0..n {
                let xrow = &xd[ni * d..(ni + 1) * d];
                for oi in 0..o {
                    let g = gout[ni * o + oi];
                    if g == T::zero() {
                        continue;
                    }
                    if needs_w {
                        let dwrow = &mut dw[oi * d..(oi + 1) * d];
                        for k in 0..d {
                            dwrow[k] += g * xrow[k];
                        }
                    }
                    if needs_b {
                        db[oi] += g;
                    }
                    if needs_x {
                        let wrow = &wdat[oi * d..(oi + 1) * d];
                        let dxrow = &mut dx[ni * d..(ni + 1) * d];
                        for k in 0..d {
                            dxrow[k] += g * wrow[k];
                        }
                    }
                }
            }
        }
        if needs_w {
            self.acc_grad(w, &dw);
        }
        if needs_b {
            self.acc_grad(b, &db);
        }
        if needs_x {
            self.acc_grad(x, &dx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &[T],
        invstd: &[T],
        train: bool,
        gout: &[T],
    ) {
        let xs = self.slots[x.0].shape.clone();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let m = n * h * w;
        let mf = T::from_usize_(m);
        let needs_x = self.needs(x);
        let needs_scale = self.needs(scale);
        let needs_shift = self.needs(shift);

        let mut dscale = vec![T::zero(); c];
        let mut dshift = vec![T::zero(); c];
        let mut dx = if needs_x {
            vec![T::zero(); n * c * h * w]
        } else {
            Vec::new()
        };
        {
            let xd = &self.slots[x.0].data;
            let sc = &self.slots[scale.0].data;
            for ci in 0..c {
                let (mu, is) = (mean[ci], invstd[ci]);
                // per-channel sums over the reduction set
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for k in 0..h * w {
                        let g = gout[base + k];
                        sum_g += g;
                        sum_gx += g * (xd[base + k] - mu) * is;
                    }
                }
                dshift[ci] = sum_g;
                dscale[ci] = sum_gx;
                if needs_x {
                    let gsc = sc[ci] * is;
                    if train {
                        let mean_g = sum_g / mf;
                        let mean_gx = sum_gx / mf;
                        for ni in 0..n {
                            let base = (ni * c + ci) * h * w;
                            for k in 0..h * w {
                                let xhat = (xd[base + k] - mu) * is;
                                dx[base + k] =
                                    gsc * (gout[base + k] - mean_g - xhat * mean_gx);
                            }
                        }
                    } else {
                        for ni in 0..n {
                            let base = (ni * c + ci) * h * w;
                            for k in 0..h * w {
                                dx[base + k] = gsc * gout[base + k];
                            }
                        }
                    }
                }
            }
        }
        if needs_scale {
            self.acc_grad(scale, &dscale);
        }
        if needs_shift {
            self.acc_grad(shift, &dshift);
        }
        if needs_x {
            self.acc_grad(x, &dx);
        }
    }
}

/// Unrolls padded patches into rows: `out[j][c*kh*kw]` for spatial position j.
#[allow(clippy::too_many_arguments)]
fn im2col_t<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let ckk = c * kh * kw;
    debug_assert_eq!(out.len(), oh * ow * ckk);
    for v in out.iter_mut() {
        *v = T::zero();
    }
    for i in 0..oh {
        for jj in 0..ow {
            let j = i * ow + jj;
            let row = &mut out[j * ckk..(j + 1) * ckk];
            for ci in 0..c {
                for ki in 0..kh {
                    let ih = (i * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let iw = (jj * stride + kj) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        row[(ci * kh + ki) * kw + kj] =
                            x[(ci * h + ih as usize) * w + iw as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-adds column rows back into the (unpadded) input gradient.
#[allow(clippy::too_many_arguments)]
fn col2im_t<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let ckk = c * kh * kw;
    for i in 0..oh {
        for jj in 0..ow {
            let j = i * ow + jj;
            let row = &cols[j * ckk..(j + 1) * ckk];
            for ci in 0..c {
                for ki in 0..kh {
                    let ih = (i * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let iw = (jj * stride + kj) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        dx[(ci * h + ih as usize) * w + iw as usize] +=
                            row[(ci * kh + ki) * kw + kj];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_hand_computed_dot() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let w = tape.leaf(&t(&[1, 1, 2, 2], &[1., 0., 0., 1.]));
        let b = tape.leaf(&t(&[1], &[0.]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.data(y), &[5.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 1, 2, 3], &[1., 2., 3., 4., 5., 6.]));
        let w = tape.leaf(&t(&[1, 1, 1, 1], &[1.]));
        let b = tape.leaf(&t(&[1], &[0.]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn conv2d_shape_mismatch_is_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::zeros(vec![1, 2, 4, 4]));
        let w = tape.leaf(&Tensor::zeros(vec![1, 3, 3, 3]));
        let b = tape.leaf(&Tensor::zeros(vec![1]));
        assert!(tape.conv2d(x, w, b, 1, 0).is_err());
    }

    #[test]
    fn linear_identity_weight() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 2], &[1., 2.]));
        let w = tape.leaf(&t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.leaf(&t(&[2], &[0., 0.]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.data(y), &[1., 2.]);
    }

    #[test]
    fn linear_zero_weight_gives_zeros() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let w = tape.leaf(&Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(&Tensor::zeros(vec![2]));
        let y = tape.linear(x, w, b).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[-1., 0., 2.]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.data(y), &[0., 0., 2.]);
    }

    #[test]
    fn relu_nonnegative_passthrough() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[0.5, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn max_pool2_basic_and_tie_break() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.data(y), &[4.0]);

        // constant input: gradient routes to the first position of the window
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], &[7., 7., 7., 7.]));
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.data(y), &[7.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn max_pool2_odd_extent_is_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 1, 3, 4]));
        assert!(tape.max_pool2(x).is_err());
    }

    #[test]
    fn global_avg_pool_mean_and_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.data(y), &[2.5]);

        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2, 1, 1], &[3., 9.]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.data(y), &[3., 9.]);
    }

    #[test]
    fn batch_norm_eval_identity_moments() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], &[0.3, 0.3, 0.3, 0.3]));
        let scale = tape.leaf(&t(&[1], &[1.]));
        let shift = tape.leaf(&t(&[1], &[0.]));
        let mut stats = BnStats::new(1);
        let y = tape.batch_norm2d(x, scale, shift, &mut stats, false).unwrap();
        for (a, b) in tape.data(y).iter().zip(tape.data(x)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.37 - 1.0).collect();
        let x = tape.leaf(&t(&[2, 1, 2, 4], &data));
        let scale = tape.leaf(&t(&[1], &[1.]));
        let shift = tape.leaf(&t(&[1], &[0.]));
        let mut stats = BnStats::new(1);
        let y = tape.batch_norm2d(x, scale, shift, &mut stats, true).unwrap();
        let out = tape.data(y);
        let mean: f64 = out.iter().sum::<f64>() / 16.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn batch_norm_degenerate_batch_is_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 2, 1, 1]));
        let scale = tape.leaf(&Tensor::zeros(vec![2]));
        let shift = tape.leaf(&Tensor::zeros(vec![2]));
        let mut stats = BnStats::new(2);
        assert!(tape.batch_norm2d(x, scale, shift, &mut stats, true).is_err());
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(&Tensor::zeros(vec![2, 4]));
        let l = tape.softmax_cross_entropy(z, &[0, 3]).unwrap();
        assert!((tape.scalar(l) - 4.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn softmax_ce_saturated_logits() {
        let mut tape = Tape::new();
        let mut z = Tensor::zeros(vec![1, 4]);
        z.data_mut()[2] = 20.0;
        let z = tape.leaf(&z);
        let l = tape.softmax_cross_entropy(z, &[2]).unwrap();
        assert!(tape.scalar(l) < 1e-6);
    }

    #[test]
    fn softmax_ce_out_of_range_label() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(&Tensor::zeros(vec![1, 4]));
        assert!(matches!(
            tape.softmax_cross_entropy(z, &[4]),
            Err(Error::Label { .. })
        ));
    }

    #[test]
    fn square_loss_examples() {
        let mut tape = Tape::new();
        let p = tape.leaf(&t(&[1, 2], &[1., 0.]));
        let q = tape.constant(&t(&[1, 2], &[0., 0.]));
        let l = tape.square_loss(p, q).unwrap();
        assert!((tape.scalar(l) - 0.5).abs() < 1e-12);

        let mut tape = Tape::new();
        let p = tape.leaf(&t(&[2, 2], &[1., 2., 3., 4.]));
        let q = tape.constant(&t(&[2, 2], &[1., 2., 3., 4.]));
        let l = tape.square_loss(p, q).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let p = tape.leaf(&t(&[3], &[5., 6., 7.]));
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[1., 1., 1.]);
    }

    #[test]
    fn backward_skips_unreachable_params() {
        let mut tape = Tape::new();
        let p = tape.leaf(&t(&[2], &[1., 2.]));
        let q = tape.leaf(&t(&[2], &[3., 4.]));
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(q).is_none());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let p = tape.leaf(&t(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(p), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(&t(&[2, 3], &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]));
            let w = tape.leaf(&t(&[2, 3], &[0.5, 0.1, -0.3, 0.2, 0.7, -0.1]));
            let b = tape.leaf(&t(&[2], &[0.01, -0.02]));
            let y = tape.linear(x, w, b).unwrap();
            let l = tape.softmax_cross_entropy(y, &[0, 1]).unwrap();
            tape.backward(l).unwrap();
            (tape.grad(w).unwrap().to_vec(), tape.grad(b).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }
}
