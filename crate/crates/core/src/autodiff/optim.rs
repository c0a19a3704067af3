use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Named parameters, iterated in a stable (sorted) order.
pub type ParamSet = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First-order optimizer with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer { kind, lr, step: 0, moments: BTreeMap::new() }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::adam(), lr)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Changes the step size; moment estimates are kept.
    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update. Parameters without an entry in `grads` receive a
    /// zero gradient. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, p) in params.iter() {
            if let Some(g) = grads.get(name) {
                if g.shape() != p.shape() {
                    return Err(Error::Shape {
                        op: "optimizer_step",
                        shapes: vec![p.shape().to_vec(), g.shape().to_vec()],
                    });
                }
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient(name.clone()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        for (name, p) in params.iter_mut() {
            let g = grads.get(name);
            match self.kind {
                OptimizerKind::Sgd => {
                    if let Some(g) = g {
                        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                            *pv -= self.lr * gv;
                        }
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    let zeros;
                    let gd = match g {
                        Some(g) => g.data(),
                        None => {
                            zeros = vec![0.0; p.numel()];
                            &zeros
                        }
                    };
                    for (((pv, &gv), mv), vv) in
                        p.data_mut().iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *pv -= self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> ParamSet {
        [(name.to_string(), Tensor::scalar(v))].into_iter().collect()
    }

    #[test]
    fn sgd_step() {
        let mut p = one("w", 1.0);
        Optimizer::sgd(0.1).step(&mut p, &one("w", 2.0)).unwrap();
        assert!((p["w"].item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_keeps_params() {
        let mut p = one("w", 1.25);
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&mut p, &one("w", 0.0)).unwrap();
        assert_eq!(p["w"].item(), 1.25);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε) ≈ lr.
        let mut p = one("w", 0.0);
        Optimizer::adam(0.001).step(&mut p, &one("w", 1.0)).unwrap();
        let want = -0.001 * 1.0 / (1.0 + 1e-8);
        assert!((p["w"].item() - want).abs() < 1e-15, "{}", p["w"].item());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = one("dec.layer0.weight", 0.0);
        let err = Optimizer::adam(0.1).step(&mut p, &one("dec.layer0.weight", f64::NAN)).unwrap_err();
        assert!(err.to_string().contains("dec.layer0.weight"));
        assert_eq!(p["dec.layer0.weight"].item(), 0.0);
    }

    #[test]
    fn adam_moments_track_param_shapes() {
        let mut p: ParamSet = [("a".to_string(), Tensor::zeros(&[2, 3]))].into_iter().collect();
        let g: ParamSet = [("a".to_string(), Tensor::full(&[2, 3], 0.5))].into_iter().collect();
        let mut opt = Optimizer::adam(0.01);
        opt.step(&mut p, &g).unwrap();
        let (m, v) = &opt.moments["a"];
        assert_eq!(m.shape(), &[2, 3]);
        assert_eq!(v.shape(), &[2, 3]);
        let bad: ParamSet = [("a".to_string(), Tensor::zeros(&[3, 2]))].into_iter().collect();
        assert!(opt.step(&mut p, &bad).is_err());
    }
}
