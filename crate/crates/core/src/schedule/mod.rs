//! Diffusion maths: noise schedules, the forward process, the Gaussian
//! posterior, the refinement step and the full reverse sampler.
//!
//! Indices follow the usual convention: `gamma[0] = 1` and
//! `gamma[t] = alpha[1] * ... * alpha[t]`, with `alpha` stored 0-based so that
//! `alpha_t == schedule.alpha(t)` for `t` in `1..=T`.

use crate::degradation::HsiCube;
use crate::numerics::Rng;
use crate::{Error, Result};

#[cfg(test)]
mod tests;

pub const DEFAULT_TRAIN_STEPS: usize = 2000;
pub const DEFAULT_BETA_START: f64 = 1e-6;
pub const DEFAULT_BETA_END: f64 = 1e-2;
pub const DEFAULT_INFERENCE_STEPS: usize = 100;

/// Training noise schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    gamma: Vec<f64>,
}

impl NoiseSchedule {
    /// Rebuilds a schedule from stored `alpha_1..alpha_T`. Gamma is recomputed
    /// so the two tables can never disagree.
    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if let Some(a) = alpha.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::invalid(format!("alpha {a} is outside (0, 1)")));
        }
        let mut gamma = Vec::with_capacity(alpha.len() + 1);
        gamma.push(1.0);
        for a in &alpha {
            let g = gamma.last().unwrap() * a;
            gamma.push(g);
        }
        if !(gamma[alpha.len()] > 0.0) {
            return Err(Error::Numeric("gamma underflows to zero".into()));
        }
        Ok(Self { alpha, gamma })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    /// `alpha_t` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `gamma_t` for `t` in `0..=T`.
    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_training_schedule(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

/// Linear beta from `beta_start` to `beta_end`, `alpha_t = 1 - beta_t`.
pub fn build_training_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("schedule step count must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "beta range must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let alpha = (0..steps)
        .map(|i| {
            let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            1.0 - (beta_start + frac * (beta_end - beta_start))
        })
        .collect();
    NoiseSchedule::from_alphas(alpha)
}

/// Draws `t ~ U{1..T}` and then `gamma` uniformly on `(gamma_t, gamma_{t-1})`.
pub fn sample_gamma(schedule: &NoiseSchedule, rng: &mut Rng) -> (usize, f64) {
    let t = rng.int_inclusive(1, schedule.steps());
    let g = rng.uniform_open(schedule.gamma(t), schedule.gamma(t - 1));
    (t, g)
}

fn combine(terms: &[(f64, &HsiCube)]) -> HsiCube {
    let first = terms[0].1;
    let mut out = first.map(|v| v * terms[0].0);
    for (c, cube) in &terms[1..] {
        for (o, v) in out.data_mut().iter_mut().zip(cube.data()) {
            *o += c * v;
        }
    }
    out
}

/// `sqrt(gamma) z0 + sqrt(1 - gamma) eps`.
pub fn forward_marginal(z0: &HsiCube, gamma: f64, eps: &HsiCube) -> Result<HsiCube> {
    z0.check_same_shape(eps, "forward_marginal noise")?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid(format!("gamma {gamma} is outside (0, 1]")));
    }
    Ok(combine(&[(gamma.sqrt(), z0), ((1.0 - gamma).sqrt(), eps)]))
}

/// `sqrt(alpha) z_prev + sqrt(1 - alpha) eps`.
pub fn forward_step(z_prev: &HsiCube, alpha: f64, eps: &HsiCube) -> Result<HsiCube> {
    z_prev.check_same_shape(eps, "forward_step noise")?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} is outside (0, 1]")));
    }
    Ok(combine(&[(alpha.sqrt(), z_prev), ((1.0 - alpha).sqrt(), eps)]))
}

/// Mean and variance of `q(z_{t-1} | z_t, z_0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub mean: HsiCube,
    pub var: f64,
}

/// Coefficients `(c0, ct, var)` with `mean = c0 z0 + ct zt`.
pub fn posterior_coefficients(gamma: f64, gamma_prev: f64, alpha: f64) -> (f64, f64, f64) {
    let denom = 1.0 - gamma;
    let c0 = gamma_prev.sqrt() * (1.0 - alpha) / denom;
    let ct = alpha.sqrt() * (1.0 - gamma_prev) / denom;
    let var = ((1.0 - gamma_prev) * (1.0 - alpha) / denom).max(0.0);
    (c0, ct, var)
}

pub fn posterior_params(z0: &HsiCube, zt: &HsiCube, t: usize, schedule: &NoiseSchedule) -> Result<PosteriorParams> {
    z0.check_same_shape(zt, "posterior_params")?;
    if t == 0 || t > schedule.steps() {
        return Err(Error::invalid(format!("step {t} is outside 1..={}", schedule.steps())));
    }
    let (c0, ct, var) = posterior_coefficients(schedule.gamma(t), schedule.gamma(t - 1), schedule.alpha(t));
    Ok(PosteriorParams { mean: combine(&[(c0, z0), (ct, zt)]), var })
}

/// One reverse step of the inference schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepParams {
    pub gamma: f64,
    pub gamma_prev: f64,
    pub alpha: f64,
}

/// Scale of the fresh noise added by [`refinement_step`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NoiseScale {
    /// `sqrt(1 - alpha_t)`.
    #[default]
    Step,
    /// The posterior standard deviation.
    Posterior,
}

impl NoiseScale {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(NoiseScale::Step),
            "posterior" => Ok(NoiseScale::Posterior),
            _ => Err(Error::invalid(format!("unknown variance mode `{s}` (expected step or posterior)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseScale::Step => "step",
            NoiseScale::Posterior => "posterior",
        }
    }
}

pub fn refinement_step(
    zt: &HsiCube,
    z0_hat: &HsiCube,
    step: StepParams,
    eps: &HsiCube,
    scale: NoiseScale,
) -> Result<HsiCube> {
    zt.check_same_shape(z0_hat, "refinement_step prediction")?;
    zt.check_same_shape(eps, "refinement_step noise")?;
    if !(step.gamma < 1.0) {
        return Err(Error::invalid("refinement_step needs gamma_t < 1"));
    }
    let (c0, ct, var) = posterior_coefficients(step.gamma, step.gamma_prev, step.alpha);
    let noise = match scale {
        NoiseScale::Step => (1.0 - step.alpha).sqrt(),
        NoiseScale::Posterior => var.sqrt(),
    };
    Ok(combine(&[(c0, z0_hat), (ct, zt), (noise, eps)]))
}

/// Sub-sampled schedule used at inference, ordered from least to most noisy.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceSchedule {
    steps: Vec<StepParams>,
    indices: Vec<usize>,
}

impl InferenceSchedule {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Step `s` in `1..=S`.
    pub fn step(&self, s: usize) -> StepParams {
        self.steps[s - 1]
    }

    pub fn steps(&self) -> &[StepParams] {
        &self.steps
    }

    /// Training-schedule index behind each step.
    pub fn training_indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Picks `S` training steps whose gammas are closest to targets spaced
/// linearly between `gamma_1` and `gamma_T`.
///
/// Indices are forced strictly increasing and leave room for the remaining
/// steps, so `S == T` yields every training step.
pub fn build_inference_schedule(train: &NoiseSchedule, count: usize) -> Result<InferenceSchedule> {
    let big_t = train.steps();
    if count == 0 || count > big_t {
        return Err(Error::invalid(format!("inference steps must lie in 1..={big_t}, got {count}")));
    }
    let (g_first, g_last) = (train.gamma(1), train.gamma(big_t));
    let mut indices = Vec::with_capacity(count);
    let mut prev = 0usize;
    for s in 1..=count {
        let target = if count == 1 {
            g_last
        } else {
            g_first + (g_last - g_first) * (s - 1) as f64 / (count - 1) as f64
        };
        // gammas decrease, so the first index at or below the target brackets it
        let gammas = train.gammas();
        let hi = gammas[1..].partition_point(|g| *g > target) + 1;
        let mut t = if hi > big_t {
            big_t
        } else if hi > 1 && (gammas[hi - 1] - target).abs() < (gammas[hi] - target).abs() {
            hi - 1
        } else {
            hi
        };
        let lo_bound = prev + 1;
        let hi_bound = big_t - (count - s);
        t = t.clamp(lo_bound, hi_bound);
        indices.push(t);
        prev = t;
    }
    let mut steps = Vec::with_capacity(count);
    let mut gamma_prev = 1.0;
    for &t in &indices {
        let gamma = train.gamma(t);
        steps.push(StepParams { gamma, gamma_prev, alpha: gamma / gamma_prev });
        gamma_prev = gamma;
    }
    Ok(InferenceSchedule { steps, indices })
}

/// A conditional denoiser predicting the clean cube from a noisy one.
pub trait DenoiseFn {
    fn predict(&mut self, x: &HsiCube, y: &HsiCube, zt: &HsiCube, gamma: f64) -> Result<HsiCube>;
}

impl<F> DenoiseFn for F
where
    F: FnMut(&HsiCube, &HsiCube, &HsiCube, f64) -> Result<HsiCube>,
{
    fn predict(&mut self, x: &HsiCube, y: &HsiCube, zt: &HsiCube, gamma: f64) -> Result<HsiCube> {
        self(x, y, zt, gamma)
    }
}

/// Sampler settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub noise_scale: NoiseScale,
}

/// Runs the reverse chain and returns the clipped final state.
pub fn sample(
    model: &mut dyn DenoiseFn,
    x: &HsiCube,
    y: &HsiCube,
    infer: &InferenceSchedule,
    opts: SampleOptions,
    rng: &mut Rng,
) -> Result<HsiCube> {
    sample_with_trajectory(model, x, y, infer, opts, rng, &mut |_, _| Ok(()))
}

/// As [`sample`], calling `observe(s, z)` after each step with the state
/// `z_{s-1}` (so the last call sees `s == 1`).
pub fn sample_with_trajectory(
    model: &mut dyn DenoiseFn,
    x: &HsiCube,
    y: &HsiCube,
    infer: &InferenceSchedule,
    opts: SampleOptions,
    rng: &mut Rng,
    observe: &mut dyn FnMut(usize, &HsiCube) -> Result<()>,
) -> Result<HsiCube> {
    let (b, h, w) = (opts.bands, opts.height, opts.width);
    let n = b * h * w;
    let mut z = HsiCube::new(b, h, w, rng.normal_vec(n))?;
    for s in (1..=infer.len()).rev() {
        let step = infer.step(s);
        let z0_hat = model.predict(x, y, &z, step.gamma)?;
        z.check_same_shape(&z0_hat, "denoiser output")?;
        let z0_hat = z0_hat.clamp01();
        let eps = if s == 1 { HsiCube::zeros(b, h, w) } else { HsiCube::new(b, h, w, rng.normal_vec(n))? };
        z = refinement_step(&z, &z0_hat, step, &eps, opts.noise_scale)?;
        if z.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite state at inference step {s}")));
        }
        observe(s, &z)?;
    }
    Ok(z.clamp01())
}
