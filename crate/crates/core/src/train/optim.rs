use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::OptimizerKind;
use crate::error::{Error, Result};
use crate::model::{round_to_f32, ParamStore};
use crate::tape::Mat;

pub type ParamGrads = BTreeMap<String, Mat>;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Plain SGD or Adam. Parameters are rounded to `f32` after each update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub t: u64,
    #[serde(skip)]
    moments: BTreeMap<String, (Mat, Mat)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Apply one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
            if p.dim() != g.dim() {
                return Err(Error::Shape(format!("gradient for {name} is {:?}, parameter {:?}", g.dim(), p.dim())));
            }
        }
        self.t += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (name, g) in grads {
                    let p = params.get_mut(name).expect("checked");
                    p.scaled_add(-lr, g);
                    round_to_f32(p);
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - BETA1.powi(self.t as i32);
                let c2 = 1.0 - BETA2.powi(self.t as i32);
                for (name, g) in grads {
                    let p = params.get_mut(name).expect("checked");
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (Mat::zeros(g.dim()), Mat::zeros(g.dim())));
                    ndarray::Zip::from(&mut *p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                    });
                    round_to_f32(p);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Mat::from_elem((1, 1), v));
        s
    }

    fn grad(v: f64) -> ParamGrads {
        [("w".to_string(), Mat::from_elem((1, 1), v))].into_iter().collect()
    }

    #[test]
    fn sgd_step() {
        let mut p = one(1.0);
        Optimizer::new(OptimizerKind::Sgd, 0.5).step(&mut p, &grad(2.0)).unwrap();
        assert_eq!(p.get("w").unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn adam_first_step_is_lr_sized_and_zero_grad_is_noop() {
        let mut p = one(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.125);
        opt.step(&mut p, &grad(3.0)).unwrap();
        assert!((p.get("w").unwrap()[[0, 0]] - 0.875).abs() < 1e-6);
        let mut q = one(1.0);
        Optimizer::new(OptimizerKind::Adam, 0.1).step(&mut q, &grad(0.0)).unwrap();
        assert_eq!(q, one(1.0));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = one(3.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05);
        for _ in 0..500 {
            let w = p.get("w").unwrap()[[0, 0]];
            opt.step(&mut p, &grad(2.0 * (w - 1.0))).unwrap();
        }
        assert!((p.get("w").unwrap()[[0, 0]] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = one(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        let bad: ParamGrads = [("x".to_string(), Mat::zeros((1, 1)))].into_iter().collect();
        assert!(opt.step(&mut p, &bad).is_err());
        let bad: ParamGrads = [("w".to_string(), Mat::zeros((2, 1)))].into_iter().collect();
        assert!(opt.step(&mut p, &bad).is_err());
    }
}
