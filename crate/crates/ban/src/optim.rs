//! AdamW with decoupled weight decay, two learning-rate groups (backbone
//! and prediction head), and the poly schedule.

use ndarray::ArrayD;

use crate::autodiff::{ParamGroup, ParamSet};
use crate::error::{Error, Result};

/// Optimizer constants. Defaults follow the common toolkit convention.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimConfig {
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_head_mult")]
    pub head_lr_mult: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_base_lr() -> f64 {
    1e-4
}
fn default_head_mult() -> f64 {
    10.0
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_batch_size() -> usize {
    8
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: default_base_lr(),
            head_lr_mult: default_head_mult(),
            weight_decay: default_weight_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            batch_size: default_batch_size(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 || self.head_lr_mult < 1.0 {
            return Err(Error::config(format!(
                "base_lr must be positive and head_lr_mult >= 1, got {} / {}",
                self.base_lr, self.head_lr_mult
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Poly decay: lr = min_lr + (base_lr - min_lr) * (1 - iter/max_iters)^power.
pub fn poly_lr(iter: usize, max_iters: usize, base_lr: f64, power: f64, min_lr: f64) -> Result<f64> {
    if max_iters == 0 {
        return Err(Error::config("poly schedule needs max_iters > 0"));
    }
    if iter > max_iters {
        return Err(Error::config(format!(
            "iteration {iter} beyond max_iters {max_iters}"
        )));
    }
    let frac = 1.0 - iter as f64 / max_iters as f64;
    Ok(min_lr + (base_lr - min_lr) * frac.powf(power))
}

/// AdamW state, parallel to a `ParamSet`'s registration order.
pub struct AdamW {
    cfg: OptimConfig,
    moments: Vec<(ArrayD<f32>, ArrayD<f32>)>,
    step_count: u64,
}

impl AdamW {
    pub fn new(set: &ParamSet, cfg: OptimConfig) -> AdamW {
        let moments = set
            .params
            .iter()
            .map(|p| {
                let shape = p.tensor.shape();
                (
                    ArrayD::zeros(ndarray::IxDyn(&shape)),
                    ArrayD::zeros(ndarray::IxDyn(&shape)),
                )
            })
            .collect();
        AdamW {
            cfg,
            moments,
            step_count: 0,
        }
    }

    /// Effective learning rate of a group at the given scheduled base rate.
    pub fn group_lr(&self, group: ParamGroup, scheduled_lr: f64) -> f64 {
        match group {
            ParamGroup::Backbone => scheduled_lr,
            ParamGroup::Head => scheduled_lr * self.cfg.head_lr_mult,
        }
    }

    /// One update over every parameter that received a gradient. Parameters
    /// without a gradient this step are left untouched.
    pub fn step(&mut self, set: &ParamSet, scheduled_lr: f64) -> Result<()> {
        if set.params.len() != self.moments.len() {
            return Err(Error::config(
                "optimizer state does not match parameter set",
            ));
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bias1 = 1.0 - self.cfg.beta1.powf(t);
        let bias2 = 1.0 - self.cfg.beta2.powf(t);
        let (b1, b2) = (self.cfg.beta1 as f32, self.cfg.beta2 as f32);
        let eps = self.cfg.eps as f32;
        let wd = self.cfg.weight_decay as f32;
        let head_mult = self.cfg.head_lr_mult;
        for (param, (m, v)) in set.params.iter().zip(self.moments.iter_mut()) {
            let Some(grad) = param.tensor.grad() else {
                continue;
            };
            let lr = match param.group {
                ParamGroup::Backbone => scheduled_lr,
                ParamGroup::Head => scheduled_lr * head_mult,
            } as f32;
            let mut data = param.tensor.data_mut();
            ndarray::Zip::from(&mut *data)
                .and(m)
                .and(v)
                .and(&grad)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bias1 as f32;
                    let v_hat = *v / bias2 as f32;
                    *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
                });
        }
        Ok(())
    }
}
