//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// The schedule decays to `lr * min_lr_ratio`.
    pub min_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to weights of rank two and above only.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 1e-4, min_lr_ratio: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..=1.0).contains(&self.min_lr_ratio)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Cosine annealing from `lr` at step 0 to `lr * min_ratio` at `total`.
pub fn cosine_lr(lr: f64, min_ratio: f64, step: usize, total: usize) -> f64 {
    let t = if total == 0 { 1.0 } else { (step.min(total) as f64) / total as f64 };
    let lo = lr * min_ratio;
    lo + 0.5 * (lr - lo) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: OptimizerConfig,
    pub step: usize,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        Self { cfg, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update at learning rate `lr`. Parameters without a gradient keep
    /// their moments and are only decayed.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let id = ParamId(i);
            let decay = if params.get(id).rank() >= 2 { lr * c.weight_decay } else { 0.0 };
            let p = params.get_mut(id);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
                }
                let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                for (k, x) in p.data_mut().iter_mut().enumerate() {
                    let gk = g.data()[k];
                    m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                    v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                    let mh = m[k] / bc1;
                    let vh = v[k] / bc2;
                    *x -= decay * *x + lr * mh / (vh.sqrt() + c.eps);
                }
            } else if decay > 0.0 {
                for x in p.data_mut() {
                    *x -= decay * *x;
                }
            }
        }
        Ok(())
    }
}
