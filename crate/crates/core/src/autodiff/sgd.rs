//! Gradient descent with classical momentum.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::DenseArray;

/// `v <- momentum * v + grad; p <- p - lr * v`, then the gradient is
/// zeroed. Velocity buffers are kept per parameter name.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut DenseArray)>,
    {
        for (name, param) in params {
            let grad = param
                .grad()
                .ok_or_else(|| {
                    Error::Contract(format!("sgd_step: parameter {name:?} has no gradient"))
                })?
                .to_vec();
            let velocity = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            if velocity.len() != grad.len() {
                return Err(Error::Contract(format!(
                    "sgd_step: parameter {name:?} changed size"
                )));
            }
            for (v, g) in velocity.iter_mut().zip(&grad) {
                *v = self.momentum * *v + g;
            }
            for (p, v) in param.data_mut().iter_mut().zip(velocity.iter()) {
                *p -= self.lr * v;
            }
            param.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(value: f64) -> DenseArray {
        let mut p = DenseArray::new(vec![1], vec![value]).unwrap();
        p.enable_grad();
        p
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = param(1.5);
        let mut sgd = Sgd::new(0.1, 0.9).unwrap();
        sgd.step([("p", &mut p)]).unwrap();
        assert_eq!(p.data(), &[1.5]);
    }

    #[test]
    fn single_step_arithmetic() {
        let mut p = param(1.0);
        p.accumulate_grad(&[2.0]).unwrap();
        let mut sgd = Sgd::new(0.1, 0.0).unwrap();
        sgd.step([("p", &mut p)]).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        // Gradient is zeroed after the step.
        assert_eq!(p.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn momentum_doubles_in_on_second_identical_step() {
        let mut p = param(0.0);
        let mut sgd = Sgd::new(0.1, 0.9).unwrap();

        p.accumulate_grad(&[1.0]).unwrap();
        sgd.step([("p", &mut p)]).unwrap();
        let first_update = -p.data()[0];

        let before = p.data()[0];
        p.accumulate_grad(&[1.0]).unwrap();
        sgd.step([("p", &mut p)]).unwrap();
        let second_update = before - p.data()[0];

        // v1 = g, v2 = 0.9 g + g = 1.9 g.
        assert!((second_update / first_update - 1.9).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_a_contract_violation() {
        let mut p = DenseArray::new(vec![1], vec![1.0]).unwrap();
        let mut sgd = Sgd::new(0.1, 0.0).unwrap();
        assert!(sgd.step([("p", &mut p)]).is_err());
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Sgd::new(0.0, 0.5).is_err());
        assert!(Sgd::new(0.1, 1.0).is_err());
        assert!(Sgd::new(0.1, -0.1).is_err());
    }
}
