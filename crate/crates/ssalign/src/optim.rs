//! SGD with momentum, weight decay folded into the gradient, and a milestone
//! learning-rate schedule:
//!
//!   g   <- grad + wd * param
//!   buf <- momentum * buf + g
//!   p   <- p - lr * buf

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    base_lr: T,
    lr: T,
    momentum: T,
    weight_decay: T,
    /// (epoch, multiplicative factor); applied from that epoch onward.
    milestones: Vec<(usize, T)>,
    buffers: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(
        lr: T,
        momentum: T,
        weight_decay: T,
        milestones: Vec<(usize, T)>,
        param_count: usize,
    ) -> Result<Self> {
        if lr <= T::zero() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if momentum < T::zero() || momentum >= T::one() {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if weight_decay < T::zero() {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        Ok(OptimizerState {
            base_lr: lr,
            lr,
            momentum,
            weight_decay,
            milestones,
            buffers: vec![None; param_count],
        })
    }

    pub fn lr(&self) -> T {
        self.lr
    }

    /// Recomputes the rate for `epoch`: initial rate times the product of the
    /// factors of all passed milestones. Piecewise constant by construction.
    pub fn set_epoch(&mut self, epoch: usize) {
        let mut lr = self.base_lr;
        for &(e, f) in &self.milestones {
            if epoch >= e {
                lr = lr * f;
            }
        }
        self.lr = lr;
    }

    /// One update over the given `(flat index, parameter)` pairs. Every
    /// parameter passed in must carry a populated gradient; the gradient is
    /// consumed by the step.
    pub fn step(&mut self, params: &mut [(usize, &mut Tensor<T>)]) -> Result<()> {
        for (idx, p) in params.iter_mut() {
            let grad = p.take_grad().ok_or_else(|| {
                Error::Usage(format!("sgd step: parameter {idx} has no gradient"))
            })?;
            let buf = self.buffers[*idx].get_or_insert_with(|| vec![T::zero(); grad.len()]);
            if buf.len() != grad.len() {
                return Err(Error::Dim(format!(
                    "momentum buffer length {} != parameter length {}",
                    buf.len(),
                    grad.len()
                )));
            }
            let data = p.data_mut();
            for i in 0..grad.len() {
                let g = grad[i] + self.weight_decay * data[i];
                buf[i] = self.momentum * buf[i] + g;
                data[i] -= self.lr * buf[i];
            }
        }
        Ok(())
    }

    pub fn buffers(&self) -> &[Option<Vec<T>>] {
        &self.buffers
    }

    pub fn restore_buffers(&mut self, buffers: Vec<Option<Vec<T>>>) -> Result<()> {
        if buffers.len() != self.buffers.len() {
            return Err(Error::Dim(format!(
                "buffer count {} != parameter count {}",
                buffers.len(),
                self.buffers.len()
            )));
        }
        self.buffers = buffers;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn vanilla_step() {
        let mut opt = OptimizerState::new(0.1, 0.0, 0.0, vec![], 1).unwrap();
        let mut p = param(1.0);
        p.accumulate_grad(&[0.5]);
        opt.step(&mut [(0, &mut p)]).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let mut opt = OptimizerState::new(0.1, 0.9, 0.0, vec![], 1).unwrap();
        let mut p = param(1.0);
        p.accumulate_grad(&[0.5]);
        opt.step(&mut [(0, &mut p)]).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-12);
        p.accumulate_grad(&[0.5]);
        opt.step(&mut [(0, &mut p)]).unwrap();
        // buf = 0.9*0.5 + 0.5 = 0.95; p = 0.95 - 0.095
        assert!((p.data()[0] - 0.855).abs() < 1e-12);
    }

    #[test]
    fn decay_only_step() {
        let mut opt = OptimizerState::new(0.1, 0.0, 0.1, vec![], 1).unwrap();
        let mut p = param(1.0);
        p.accumulate_grad(&[0.0]);
        opt.step(&mut [(0, &mut p)]).unwrap();
        assert!((p.data()[0] - 0.99).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_usage_error() {
        let mut opt = OptimizerState::new(0.1, 0.0, 0.0, vec![], 1).unwrap();
        let mut p = param(1.0);
        assert!(matches!(
            opt.step(&mut [(0, &mut p)]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn milestone_schedule_is_piecewise_product() {
        let mut opt =
            OptimizerState::<f64>::new(0.1, 0.0, 0.0, vec![(15, 0.1), (23, 0.1)], 0).unwrap();
        opt.set_epoch(0);
        assert!((opt.lr() - 0.1).abs() < 1e-12);
        opt.set_epoch(14);
        assert!((opt.lr() - 0.1).abs() < 1e-12);
        opt.set_epoch(15);
        assert!((opt.lr() - 0.01).abs() < 1e-12);
        opt.set_epoch(22);
        assert!((opt.lr() - 0.01).abs() < 1e-12);
        opt.set_epoch(23);
        assert!((opt.lr() - 0.001).abs() < 1e-12);
    }

    #[test]
    fn quadratic_loss_decreases_monotonically() {
        // f(x) = 0.5 * c * x^2, grad = c * x; stable for lr < 2/c
        let c = 4.0;
        let mut opt = OptimizerState::new(0.3, 0.0, 0.0, vec![], 1).unwrap();
        let mut p = param(2.0);
        let mut prev = 0.5 * c * 4.0;
        for _ in 0..50 {
            let x = p.data()[0];
            p.accumulate_grad(&[c * x]);
            opt.step(&mut [(0, &mut p)]).unwrap();
            let loss = 0.5 * c * p.data()[0] * p.data()[0];
            assert!(loss <= prev + 1e-15);
            prev = loss;
        }
    }
}
