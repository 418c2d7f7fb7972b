use std::collections::BTreeMap;

use crate::cdformer::ModelParams;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter plus the update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> =
            params.tensors().iter().map(|(k, t)| (k.clone(), vec![0.0; t.len()])).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`
/// (no-op when `max_norm` is zero). Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// One bias-corrected Adam step for every parameter present in `grads`.
/// Parameters without a gradient keep their values and moments.
///
/// Parameters and moments are rounded to `f32` afterwards so that a saved
/// checkpoint reproduces the in-memory state exactly.
pub fn adam_update(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Vec<f64>>,
    opt: &mut OptimState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
        let (m, v) = (opt.m.get(name), opt.v.get(name));
        if g.len() != p.len() || m.map(Vec::len) != Some(p.len()) || v.map(Vec::len) != Some(p.len()) {
            return Err(Error::shape(format!("gradient or moment size mismatch for {name}")));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = opt.m.get_mut(name).expect("checked above");
        let v = opt.v.get_mut(name).expect("checked above");
        for i in 0..g.len() {
            let mi = (cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i]) as f32 as f64;
            let vi = (cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i]) as f32 as f64;
            m[i] = mi;
            v[i] = vi;
            let update = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            p.data[i] = (p.data[i] - update) as f32 as f64;
        }
    }
    Ok(())
}
