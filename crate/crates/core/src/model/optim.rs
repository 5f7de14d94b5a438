use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from `lr` to `lr · final_fraction` over `total_steps`,
    /// constant afterwards.
    Cosine { total_steps: u64, final_fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: LrSchedule::Constant,
        }
    }
}

impl AdamConfig {
    /// Learning rate used for update number `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine {
                total_steps,
                final_fraction,
            } => {
                let t = (step as f64 / total_steps.max(1) as f64).min(1.0);
                let w = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
                self.lr * (final_fraction + (1.0 - final_fraction) * w)
            }
        }
    }
}

/// Adaptive-moment optimizer state, one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Nothing changes unless every new parameter and
    /// moment is finite.
    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<(), ModelError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(ModelError::Input(format!(
                "optimizer holds {} moments for {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let lr = self.config.lr_at(self.step);
        let t = (self.step + 1) as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        let mut staged = Vec::with_capacity(params.len());
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if g.shape() != p.shape() {
                return Err(ModelError::Input(format!(
                    "gradient {i} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let n = p.len();
            let (mut np, mut nm, mut nv) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            for j in 0..n {
                let gj = g.data()[j];
                let m = beta1 * self.m[i].data()[j] + (1.0 - beta1) * gj;
                let v = beta2 * self.v[i].data()[j] + (1.0 - beta2) * gj * gj;
                let step = lr * (m / c1) / ((v / c2).sqrt() + eps);
                np.push(p.data()[j] - step);
                nm.push(m);
                nv.push(v);
            }
            if !np.iter().chain(&nm).chain(&nv).all(|v| v.is_finite()) {
                return Err(ModelError::NonFinite {
                    term: format!("parameter update {i}"),
                });
            }
            staged.push((np, nm, nv));
        }
        for (i, (p, (np, nm, nv))) in params.into_iter().zip(staged).enumerate() {
            p.data_mut().copy_from_slice(&np);
            self.m[i].data_mut().copy_from_slice(&nm);
            self.v[i].data_mut().copy_from_slice(&nv);
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        let g = Tensor::vector(vec![0.5, -3.0]).unwrap();
        opt.update(vec![&mut p], &[g]).unwrap();
        // bias-corrected first step is lr · sign(g) up to ε
        assert!((p.data()[0] - (1.0 - 1e-4)).abs() < 1e-11);
        assert!((p.data()[1] - (-2.0 + 1e-4)).abs() < 1e-11);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Tensor::vector(vec![3.0]).unwrap();
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
            &[&p],
        );
        for _ in 0..2000 {
            let g = Tensor::vector(vec![2.0 * (p.data()[0] - 1.0)]).unwrap();
            opt.update(vec![&mut p], &[g]).unwrap();
        }
        assert!((p.data()[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn non_finite_update_leaves_state() {
        let mut p = Tensor::vector(vec![1.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        let before = (p.clone(), opt.clone());
        let err = opt.update(vec![&mut p], &[Tensor::vector(vec![f64::NAN]).unwrap()]);
        assert!(matches!(err, Err(ModelError::NonFinite { .. })));
        assert_eq!((p, opt), before);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = AdamConfig {
            lr: 1.0,
            schedule: LrSchedule::Cosine {
                total_steps: 100,
                final_fraction: 0.1,
            },
            ..Default::default()
        };
        assert_eq!(c.lr_at(0), 1.0);
        assert!((c.lr_at(50) - 0.55).abs() < 1e-12);
        assert!((c.lr_at(100) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(500) - 0.1).abs() < 1e-12);
    }
}
