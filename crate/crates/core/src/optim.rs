//! Learning-rate schedule and AdamW with parameter groups.

use gastwin_tensor::Real;

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::model::{NamedParam, ParamGroup};

/// Linear warmup from `warmup_start_lr` to `base_lr`, then polynomial decay
/// to zero at `total_iters`. Iterations past the end are clamped.
pub fn lr_at(iter: usize, cfg: &OptimConfig) -> f64 {
    let iter = iter.min(cfg.total_iters);
    if iter < cfg.warmup_iters {
        let t = iter as f64 / cfg.warmup_iters as f64;
        cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * t
    } else {
        let span = (cfg.total_iters - cfg.warmup_iters) as f64;
        let t = (iter - cfg.warmup_iters) as f64 / span;
        cfg.base_lr * (1.0 - t).powf(cfg.poly_power)
    }
}

/// Learning-rate multiplier and weight decay for one group.
pub fn group_settings(group: ParamGroup, cfg: &OptimConfig) -> (f64, f64) {
    match group {
        ParamGroup::Backbone => (1.0, cfg.weight_decay),
        ParamGroup::Head => (cfg.head_lr_multiplier, cfg.weight_decay),
        ParamGroup::Norm => (1.0, cfg.norm_weight_decay),
    }
}

/// Adam moments kept in 64-bit regardless of the parameter precision.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Real>(cfg: &OptimConfig, params: &[NamedParam<T>]) -> Self {
        Self {
            cfg: cfg.clone(),
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        }
    }

    /// One bias-corrected update at base learning rate `lr`. Weight decay is
    /// decoupled: `θ ← θ·(1 − lr_g·wd_g)` before the Adam step. Parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step<T: Real>(&mut self, params: &[NamedParam<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Numerical(format!(
                "optimizer holds {} moment slots for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = self.cfg.betas;
        let eps = self.cfg.eps;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (i, p) in params.iter().enumerate() {
            let (mult, wd) = group_settings(p.group, &self.cfg);
            let lr_g = lr * mult;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != p.tensor.numel() {
                return Err(Error::Numerical(format!(
                    "moment size {} does not match parameter {} ({} elements)",
                    m.len(),
                    p.name,
                    p.tensor.numel()
                )));
            }
            let grad = p.tensor.grad();
            let mut data = p.tensor.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j].as_f64());
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut x = data[j].as_f64();
                x *= 1.0 - lr_g * wd;
                x -= lr_g * mhat / (vhat.sqrt() + eps);
                if !x.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite value in {} after optimizer step {}",
                        p.name, self.step
                    )));
                }
                data[j] = T::of(x);
            }
        }
        Ok(())
    }
}
