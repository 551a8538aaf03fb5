use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn desk() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn paper() -> Self {
        Self { lr: 1e-4, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment buffers, keyed like the parameters they track.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamMoments {
    pub m: ParamStore,
    pub v: ParamStore,
}

/// One bias-corrected Adam update of every parameter named in `grads`, at
/// step `t >= 1`. Returns `Ok(false)` and leaves everything untouched when
/// any gradient is non-finite.
pub fn adam_step(
    params: &mut ParamStore,
    moments: &mut AdamMoments,
    grads: &BTreeMap<String, Tensor>,
    t: u64,
    cfg: &AdamConfig,
) -> Result<bool> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::Input(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::Input(format!("gradient for `{name}` is {:?}, parameter is {:?}", g.shape(), p.shape())));
        }
    }
    if grads.values().any(|g| !g.is_finite()) {
        log::warn!("non-finite gradient at step {t}; update skipped");
        return Ok(false);
    }
    let t = t.max(1) as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        if !moments.m.contains(name) {
            moments.m.init_zeros(name.clone(), g.shape());
            moments.v.init_zeros(name.clone(), g.shape());
        }
        let m = moments.m.get_mut(name).expect("inserted above");
        for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = moments.v.get_mut(name).expect("inserted above");
        for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let (m, v) = (moments.m.get(name).expect("present"), moments.v.get(name).expect("present"));
        let step: Vec<f64> = m
            .data()
            .iter()
            .zip(v.data())
            .map(|(mi, vi)| cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps))
            .collect();
        let p = params.get_mut(name).expect("validated above");
        for (pi, s) in p.data_mut().iter_mut().zip(step) {
            *pi -= s;
        }
    }
    Ok(true)
}
