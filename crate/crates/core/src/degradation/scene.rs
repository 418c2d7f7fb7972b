use super::HsiCube;
use crate::numerics::{reflect_index, Rng};
use crate::{Error, Result};

/// Parameters of a synthetic linear-mixing scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub endmembers: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    /// Correlation length (Gaussian sigma, pixels) of the abundance maps.
    pub smoothness: f64,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.endmembers == 0 {
            return Err(Error::invalid("scene needs at least one endmember"));
        }
        if self.bands == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("scene dimensions must be positive"));
        }
        if !(self.smoothness >= 0.0 && self.smoothness.is_finite()) {
            return Err(Error::invalid("smoothness must be a finite non-negative number"));
        }
        Ok(())
    }
}

/// A synthesised scene together with the factors that built it.
#[derive(Clone, Debug)]
pub struct SceneParts {
    pub cube: HsiCube,
    /// `[endmembers, height, width]`, summing to one over endmembers at each pixel.
    pub abundances: Vec<f64>,
    /// `[endmembers, bands]`, before the global rescale.
    pub signatures: Vec<f64>,
    /// Global divisor applied to the mixture so its maximum is one.
    pub scale: f64,
}

fn blur_plane(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let s: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|v| v / s).collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(t, k)| k * plane[y * w + reflect_index(x as isize + t as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(t, k)| k * tmp[reflect_index(y as isize + t as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Builds `Z = sum_k a_k(x, y) s_k(lambda)` from smooth random abundance maps
/// (low-pass filtered noise, softmax-normalised per pixel) and smooth random
/// signatures, rescaled so the maximum value is one.
pub fn synthesize_scene_parts(cfg: &SceneConfig, rng: &mut Rng) -> Result<SceneParts> {
    cfg.validate()?;
    let (k, b, h, w) = (cfg.endmembers, cfg.bands, cfg.height, cfg.width);
    let n = h * w;

    let mut signatures = Vec::with_capacity(k * b);
    for _ in 0..k {
        let baseline = 0.05 + 0.15 * rng.uniform();
        let bumps: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                let centre = rng.uniform() * b as f64;
                let width = (0.15 + 0.35 * rng.uniform()) * b as f64;
                let amp = 0.2 + 0.8 * rng.uniform();
                (centre, width, amp)
            })
            .collect();
        for j in 0..b {
            let v: f64 = bumps
                .iter()
                .map(|&(c, wd, a)| a * (-0.5 * ((j as f64 - c) / wd).powi(2)).exp())
                .sum();
            signatures.push(baseline + v);
        }
    }

    // logits: smoothed noise normalised to unit spread, then a softmax over endmembers
    let mut logits = Vec::with_capacity(k * n);
    for _ in 0..k {
        let noise = rng.normal_vec(n);
        let smooth = blur_plane(&noise, h, w, cfg.smoothness);
        let mean = smooth.iter().sum::<f64>() / n as f64;
        let sd = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let sd = if sd > 1e-12 { sd } else { 1.0 };
        logits.extend(smooth.iter().map(|v| 2.0 * (v - mean) / sd));
    }
    let mut abundances = vec![0.0; k * n];
    for p in 0..n {
        let max = (0..k).map(|e| logits[e * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = (0..k).map(|e| (logits[e * n + p] - max).exp()).collect();
        let s: f64 = exps.iter().sum();
        for e in 0..k {
            abundances[e * n + p] = exps[e] / s;
        }
    }

    let mut data = vec![0.0; b * n];
    for e in 0..k {
        let a = &abundances[e * n..(e + 1) * n];
        for j in 0..b {
            let s = signatures[e * b + j];
            let dst = &mut data[j * n..(j + 1) * n];
            dst.iter_mut().zip(a).for_each(|(d, &av)| *d += av * s);
        }
    }
    let scale = data.iter().copied().fold(0.0, f64::max);
    data.iter_mut().for_each(|v| *v /= scale);
    Ok(SceneParts { cube: HsiCube::new(b, h, w, data)?, abundances, signatures, scale })
}

pub fn synthesize_scene(cfg: &SceneConfig, rng: &mut Rng) -> Result<HsiCube> {
    Ok(synthesize_scene_parts(cfg, rng)?.cube)
}
