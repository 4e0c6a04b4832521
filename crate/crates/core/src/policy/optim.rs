use serde::{Deserialize, Serialize};

use super::{Gradient, PolicyError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer with serializable state, so interrupted runs can
/// resume bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    /// Rescale the gradient to this global norm when it is exceeded.
    pub clip_norm: Option<f64>,
    pub steps: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, clip_norm: Option<f64>) -> Self {
        Self {
            kind,
            clip_norm,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn sgd() -> Self {
        Self::new(OptimizerKind::Sgd, None)
    }

    /// Apply one step in place. The parameters are untouched on error.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grad: &Gradient,
        learning_rate: f64,
    ) -> Result<(), PolicyError> {
        if grad.0.len() != params.len() {
            return Err(PolicyError::ShapeMismatch {
                expected: params.len(),
                found: grad.0.len(),
            });
        }
        if !grad.is_finite() {
            return Err(PolicyError::NonFiniteGradient);
        }
        let mut factor = 1.0;
        if let Some(max) = self.clip_norm {
            let norm = grad.norm();
            if norm > max && norm > 0.0 {
                factor = max / norm;
            }
        }
        let n = params.len();
        if !matches!(self.kind, OptimizerKind::Sgd) && self.m.len() != n {
            self.m = vec![0.0; n];
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.v = vec![0.0; n];
            }
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(&grad.0) {
                    *p -= learning_rate * factor * g;
                }
            }
            OptimizerKind::Momentum { beta } => {
                for ((p, g), m) in params.iter_mut().zip(&grad.0).zip(&mut self.m) {
                    *m = beta * *m + factor * g;
                    *p -= learning_rate * *m;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(&grad.0)
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    let g = factor * g;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut p = vec![1.0, 2.0];
        Optimizer::sgd()
            .step(&mut p, &Gradient(vec![0.5, -1.0]), 0.1)
            .unwrap();
        assert_eq!(p, vec![0.95, 2.1]);
    }

    #[test]
    fn clipping_rescales() {
        let mut p = vec![0.0, 0.0];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, Some(1.0));
        opt.step(&mut p, &Gradient(vec![3.0, 4.0]), 1.0).unwrap();
        assert!((p[0] + 0.6).abs() < 1e-12 && (p[1] + 0.8).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = vec![0.0, 0.0];
        let mut opt = Optimizer::new(OptimizerKind::adam(), None);
        opt.step(&mut p, &Gradient(vec![10.0, -0.001]), 0.01).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-6);
        assert!((p[1] - 0.01).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = vec![1.0];
        let mut opt = Optimizer::sgd();
        assert_eq!(
            opt.step(&mut p, &Gradient(vec![f64::NAN]), 0.1),
            Err(PolicyError::NonFiniteGradient)
        );
        assert!(matches!(
            opt.step(&mut p, &Gradient(vec![1.0, 2.0]), 0.1),
            Err(PolicyError::ShapeMismatch { .. })
        ));
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn state_round_trips() {
        let mut p = vec![1.0, -1.0];
        let mut opt = Optimizer::new(OptimizerKind::adam(), Some(5.0));
        opt.step(&mut p, &Gradient(vec![0.3, 0.2]), 0.01).unwrap();
        let json = serde_json::to_string(&opt).unwrap();
        let back: Optimizer = serde_json::from_str(&json).unwrap();
        assert_eq!(opt, back);
    }
}
