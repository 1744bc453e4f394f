//! First-order optimizers over flat parameter vectors.
//!
//! `step` returns an update direction; callers scale it by their own
//! per-parameter learning rates and subtract.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerKind {
    pub fn validate(&self) -> Result<(), String> {
        if let OptimizerKind::Adam { beta1, beta2, eps } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return Err(format!("adam betas must lie in [0, 1), got ({beta1}, {beta2})"));
            }
            if !(eps > 0.0) {
                return Err(format!("adam eps must be positive, got {eps}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        Self {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, grad: &[f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        match self.kind {
            OptimizerKind::Sgd => grad.to_vec(),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                grad.iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                        self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                        (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps)
                    })
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_is_identity() {
        let mut o = Optimizer::new(OptimizerKind::Sgd, 3);
        assert_eq!(o.step(&[1.0, -2.0, 0.5]), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_is_sign() {
        let mut o = Optimizer::new(OptimizerKind::default(), 3);
        let d = o.step(&[3.0, -0.01, 0.0]);
        assert!((d[0] - 1.0).abs() < 1e-8);
        assert!((d[1] + 1.0).abs() < 1e-5);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut o = Optimizer::new(OptimizerKind::default(), 2);
        let mut x = [3.0, -2.0];
        for _ in 0..3000 {
            let g = [2.0 * x[0], 8.0 * x[1]];
            let d = o.step(&g);
            x[0] -= 0.01 * d[0];
            x[1] -= 0.01 * d[1];
        }
        assert!(x[0].abs() < 1e-2 && x[1].abs() < 1e-2, "{x:?}");
    }

    #[test]
    fn json_forms() {
        let k: OptimizerKind = serde_json::from_str(r#""sgd""#).unwrap();
        assert_eq!(k, OptimizerKind::Sgd);
        let k: OptimizerKind = serde_json::from_str(r#"{"adam":{"beta1":0.5,"beta2":0.9,"eps":1e-6}}"#).unwrap();
        assert_eq!(
            k,
            OptimizerKind::Adam {
                beta1: 0.5,
                beta2: 0.9,
                eps: 1e-6
            }
        );
        assert!(OptimizerKind::Adam {
            beta1: 1.0,
            beta2: 0.9,
            eps: 1e-6
        }
        .validate()
        .is_err());
    }
}
