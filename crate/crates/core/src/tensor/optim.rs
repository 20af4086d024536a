use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// SGD with Nesterov momentum:
/// `v <- momentum * v + g; p <- p - lr * (g + momentum * v)`.
#[derive(Clone, Debug)]
pub struct Sgd<S> {
    lr: S,
    momentum: S,
    velocity: Vec<Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(lr: S, momentum: S) -> Result<Self> {
        if !(lr > S::zero()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        if !(momentum >= S::zero() && momentum < S::one()) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn lr(&self) -> S {
        self.lr
    }

    pub fn set_lr(&mut self, lr: S) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Tensor<S>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if v.len() != p.len() {
                return Err(Error::invalid("parameter set changed between optimizer steps"));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * (gv + self.momentum * *vv);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: f64) -> Tensor<f64> {
        Tensor::from_f64(vec![1], &[x]).unwrap()
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut p = scalar_param(1.0);
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        opt.step(&mut [&mut p], &[scalar_param(2.0)]).unwrap();
        assert!((p.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::from_f64(vec![3], &[0.3, -1.0, 4.0]).unwrap();
        let before = p.clone();
        let mut opt = Sgd::new(0.5, 0.9).unwrap();
        for _ in 0..3 {
            opt.step(&mut [&mut p], &[Tensor::zeros(vec![3])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn nesterov_two_step_trace() {
        // step 1: v = 1,   p = 0 - 0.1 * (1 + 0.9 * 1)   = -0.19
        // step 2: v = 1.9, p = -0.19 - 0.1 * (1 + 0.9 * 1.9) = -0.461
        let mut p = scalar_param(0.0);
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        opt.step(&mut [&mut p], &[scalar_param(1.0)]).unwrap();
        assert!((p.item() + 0.19).abs() < 1e-12);
        opt.step(&mut [&mut p], &[scalar_param(1.0)]).unwrap();
        assert!((p.item() + 0.461).abs() < 1e-12);
    }

    #[test]
    fn rejects_shape_mismatch_and_bad_hyperparameters() {
        let mut p = scalar_param(0.0);
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        assert!(opt.step(&mut [&mut p], &[Tensor::zeros(vec![2])]).is_err());
        assert!(Sgd::<f64>::new(0.0, 0.5).is_err());
        assert!(Sgd::<f64>::new(0.1, 1.0).is_err());
    }
}
