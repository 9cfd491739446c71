//! Central finite-difference gradient oracle shared by the gradient-check
//! and acceptance suites. Everything runs at f64 so the comparison has
//! roughly ten digits of headroom over the 1e-5 tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssalign::tape::{Tape, Var};
use ssalign::tensor::Tensor;

pub const GRAD_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-6;

/// Checks analytic gradients of a scalar-valued graph against central finite
/// differences, every input element, relative error < `GRAD_TOL`.
///
/// `build` must construct the same graph each call from the given leaves;
/// any internal state (e.g. batch-norm running stats) must be created fresh
/// inside it.
pub fn grad_check<F>(name: &str, inputs: &[Tensor<f64>], build: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |tensors: &[Tensor<f64>]| -> (f64, Vec<Option<Vec<f64>>>, Tape<f64>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &vars);
        let value = tape.scalar(loss);
        tape.backward(loss).expect("backward succeeds");
        let grads = vars
            .iter()
            .map(|&v| tape.grad(v).map(|g| g.to_vec()))
            .collect();
        (value, grads, tape)
    };

    let (_, grads, _) = eval(inputs);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, grad) in grads.iter().enumerate() {
        let grad = grad
            .as_ref()
            .unwrap_or_else(|| panic!("{name}: input {ti} received no gradient"));
        for j in 0..grad.len() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work).0;
            work[ti].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work).0;
            work[ti].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let g = grad[j];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-3);
            assert!(
                rel < GRAD_TOL,
                "{name}: input {ti} element {j}: analytic {g:.10e} vs fd {fd:.10e} (rel {rel:.3e})"
            );
        }
    }
}

/// Uniform random tensor in [lo, hi).
pub fn rand_tensor(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Random tensor bounded away from zero, for kinked ops like relu.
pub fn rand_tensor_off_zero(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Random tensor whose values are well separated, for tie-breaking ops like
/// max pooling (minimum gap far above the finite-difference step).
pub fn rand_tensor_distinct(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    vals.shuffle(rng);
    let offset = rng.gen_range(-0.5..0.5);
    Tensor::new(shape, vals.into_iter().map(|v| v + offset).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reduces an op output to a scalar through a fixed random quadratic so the
/// upstream gradient is nonuniform.
pub fn reduce(tape: &mut Tape<f64>, out: Var, target: &Tensor<f64>) -> Var {
    let t = tape.constant(target);
    tape.square_loss(out, t).unwrap()
}

/// Per-op finite-difference checks for one random draw.
pub fn check_conv2d(seed: u64) {
    let mut r = rng(seed);
    let x = rand_tensor(vec![2, 2, 5, 5], -1.0, 1.0, &mut r);
    let w = rand_tensor(vec![3, 2, 3, 3], -0.5, 0.5, &mut r);
    let b = rand_tensor(vec![3], -0.5, 0.5, &mut r);
    let target = rand_tensor(vec![2, 3, 5, 5], -1.0, 1.0, &mut r);
    grad_check("conv2d", &[x, w, b], |tape, v| {
        let y = tape.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
        reduce(tape, y, &target)
    });
}

pub fn check_linear(seed: u64) {
    let mut r = rng(seed);
    let x = rand_tensor(vec![4, 6], -1.0, 1.0, &mut r);
    let w = rand_tensor(vec![3, 6], -0.5, 0.5, &mut r);
    let b = rand_tensor(vec![3], -0.5, 0.5, &mut r);
    let target = rand_tensor(vec![4, 3], -1.0, 1.0, &mut r);
    grad_check("linear", &[x, w, b], |tape, v| {
        let y = tape.linear(v[0], v[1], v[2]).unwrap();
        reduce(tape, y, &target)
    });
}

pub fn check_relu(seed: u64) {
    let mut r = rng(seed);
    let x = rand_tensor_off_zero(vec![3, 4, 2, 2], &mut r);
    let target = rand_tensor(vec![3, 4, 2, 2], -1.0, 1.0, &mut r);
    grad_check("relu", &[x], |tape, v| {
        let y = tape.relu(v[0]).unwrap();
        reduce(tape, y, &target)
    });
}

pub fn check_max_pool2(seed: u64) {
    let mut r = rng(seed);
    let x = rand_tensor_distinct(vec![2, 3, 4, 4], &mut r);
    let target = rand_tensor(vec![2, 3, 2, 2], -1.0, 1.0, &mut r);
    grad_check("max_pool2", &[x], |tape, v| {
        let y = tape.max_pool2(v[0]).unwrap();
        reduce(tape, y, &target)
    });
}

pub fn check_global_avg_pool(seed: u64) {
    let mut r = rng(seed);
    let x = rand_tensor(vec![3, 5, 4, 4], -1.0, 1.0, &mut r);
    let target = rand_tensor(vec![3, 5], -1.0, 1.0, &mut r);
    grad_check("global_avg_pool", &[x], |tape, v| {
        let y = tape.global_avg_pool(v[0]).unwrap();
        reduce(tape, y, &target)
    });
}

pub fn check_batch_norm(seed: u64) {
    use ssalign::tape::BnStats;
    let mut r = rng(seed);
    let x = rand_tensor(vec![4, 3, 3, 3], -1.0, 1.0, &mut r);
    let scale = rand_tensor(vec![3], 0.5, 1.5, &mut r);
    let shift = rand_tensor(vec![3], -0.5, 0.5, &mut r);
    let target = rand_tensor(vec![4, 3, 3, 3], -1.0, 1.0, &mut r);
    grad_check("batch_norm2d", &[x, scale, shift], |tape, v| {
        let mut stats = BnStats::new(3);
        let y = tape.batch_norm2d(v[0], v[1], v[2], &mut stats, true).unwrap();
        reduce(tape, y, &target)
    });
}

pub fn check_softmax_cross_entropy(seed: u64) {
    use rand::Rng;
    let mut r = rng(seed);
    let z = rand_tensor(vec![5, 4], -2.0, 2.0, &mut r);
    let labels: Vec<usize> = (0..5).map(|_| r.gen_range(0..4)).collect();
    grad_check("softmax_cross_entropy", &[z], |tape, v| {
        tape.softmax_cross_entropy(v[0], &labels).unwrap()
    });
}

pub fn check_square_loss(seed: u64) {
    let mut r = rng(seed);
    let p = rand_tensor(vec![4, 2], -1.0, 1.0, &mut r);
    let target = rand_tensor(vec![4, 2], -1.0, 1.0, &mut r);
    grad_check("square_loss", &[p], |tape, v| {
        let t = tape.constant(&target);
        tape.square_loss(v[0], t).unwrap()
    });
}

pub fn check_add_and_sum(seed: u64) {
    let mut r = rng(seed);
    let a = rand_tensor(vec![3, 4], -1.0, 1.0, &mut r);
    let b = rand_tensor(vec![3, 4], -1.0, 1.0, &mut r);
    let target = rand_tensor(vec![3, 4], -1.0, 1.0, &mut r);
    grad_check("add", &[a.clone(), b], |tape, v| {
        let y = tape.add(v[0], v[1]).unwrap();
        reduce(tape, y, &target)
    });
    grad_check("sum", &[a], |tape, v| tape.sum(v[0]).unwrap());
}

/// Whole-network check: residual encoder (conv, batch norm, relu, pooling,
/// skip connections) with a classification and a regression head, loss =
/// cross entropy + square loss. A random subsample of elements is perturbed
/// per parameter.
pub fn check_full_composition() {
    use ssalign::model::{init_model, EncoderConfig, HeadConfig, HeadKind, Mode, ModelParams};
    let cfg = EncoderConfig {
        in_channels: 1,
        widths: vec![3, 4],
        feature_dim: 4,
        residual: true,
    };
    let heads = [
        HeadConfig {
            task_id: 0,
            output_dim: 3,
            kind: HeadKind::Classification,
        },
        HeadConfig {
            task_id: 1,
            output_dim: 2,
            kind: HeadKind::Regression,
        },
    ];
    let base: ModelParams<f64> = init_model(&cfg, &heads, 7).unwrap();
    let mut r = rng(11);
    let images = rand_tensor(vec![3, 1, 8, 8], 0.0, 1.0, &mut r);
    let labels = [0usize, 2, 1];
    let reg_target = rand_tensor(vec![3, 2], 0.0, 1.0, &mut r);

    let eval = |tensors: &[Tensor<f64>]| -> (f64, Vec<Vec<f64>>) {
        let mut m = base.clone();
        for (p, t) in m.params_mut().into_iter().zip(tensors) {
            *p = t.clone();
        }
        let mut tape = Tape::new();
        let vars = m.register(&mut tape);
        let x = tape.constant(&images);
        let f = m.encode_on(&mut tape, &vars, x, Mode::Train).unwrap();
        let z0 = m.head_on(&mut tape, &vars, 0, f).unwrap();
        let z1 = m.head_on(&mut tape, &vars, 1, f).unwrap();
        let ce = tape.softmax_cross_entropy(z0, &labels).unwrap();
        let t = tape.constant(&reg_target);
        let sq = tape.square_loss(z1, t).unwrap();
        let loss = tape.add(ce, sq).unwrap();
        let value = tape.scalar(loss);
        tape.backward(loss).unwrap();
        let grads = vars
            .all()
            .iter()
            .map(|&v| tape.grad(v).unwrap().to_vec())
            .collect();
        (value, grads)
    };
    let params0: Vec<Tensor<f64>> = base.params().into_iter().cloned().collect();
    let (_, grads) = eval(&params0);
    let mut work = params0.clone();
    for (ti, grad) in grads.iter().enumerate() {
        let n = grad.len();
        let mut picks: Vec<usize> = (0..n).collect();
        if n > 5 {
            use rand::seq::SliceRandom;
            picks.shuffle(&mut r);
            picks.truncate(5);
        }
        for &j in &picks {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work).0;
            work[ti].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work).0;
            work[ti].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let g = grad[j];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-3);
            assert!(
                rel < GRAD_TOL,
                "composition: param {ti} element {j}: analytic {g:.10e} vs fd {fd:.10e} (rel {rel:.3e})"
            );
        }
    }
}
