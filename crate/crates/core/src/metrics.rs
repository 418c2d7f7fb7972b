//! Fusion quality metrics: PSNR, SSIM, SAM and ERGAS.
//!
//! Conventions (all inputs are reflectance on a unit dynamic range):
//! - PSNR is `10 log10(1 / MSE_b)` per band, averaged over bands; a band with
//!   zero error scores the 99 dB cap.
//! - SSIM uses an 11x11 Gaussian window (sigma 1.5) over valid positions only,
//!   `C1 = 0.01^2`, `C2 = 0.03^2`, averaged over windows then bands.
//! - SAM is the mean per-pixel spectral angle in degrees, skipping pixels whose
//!   spectrum is zero in either cube.
//! - ERGAS is `100 / factor * sqrt(mean_b(MSE_b / mu_b^2))` with `mu_b` the
//!   reference band mean.

use crate::degradation::HsiCube;
use crate::{Error, Result};

pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// All four metrics for one reference/estimate pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub sam_deg: f64,
    pub ergas: f64,
}

impl MetricReport {
    pub fn compute(reference: &HsiCube, estimate: &HsiCube, factor: usize) -> Result<Self> {
        Ok(Self {
            psnr_db: psnr(reference, estimate)?,
            ssim: ssim(reference, estimate)?,
            sam_deg: sam(reference, estimate)?,
            ergas: ergas(reference, estimate, factor)?,
        })
    }

    /// Tab-separated `psnr ssim sam ergas` with fixed precision.
    pub fn format_row(&self) -> String {
        format!("{:.2}\t{:.4}\t{:.2}\t{:.3}", self.psnr_db, self.ssim, self.sam_deg, self.ergas)
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let sum = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricReport {
            psnr_db: sum(|r| r.psnr_db),
            ssim: sum(|r| r.ssim),
            sam_deg: sum(|r| r.sam_deg),
            ergas: sum(|r| r.ergas),
        })
    }
}

fn band_mse(reference: &HsiCube, estimate: &HsiCube) -> Vec<f64> {
    (0..reference.bands())
        .map(|b| {
            let (r, e) = (reference.band(b), estimate.band(b));
            r.iter().zip(e).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / r.len() as f64
        })
        .collect()
}

pub fn psnr(reference: &HsiCube, estimate: &HsiCube) -> Result<f64> {
    reference.check_same_shape(estimate, "psnr")?;
    let mse = band_mse(reference, estimate);
    let per_band = mse.iter().map(|&m| {
        if m == 0.0 {
            PSNR_CAP_DB
        } else {
            (10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB)
        }
    });
    Ok(per_band.sum::<f64>() / mse.len() as f64)
}

pub fn sam(reference: &HsiCube, estimate: &HsiCube) -> Result<f64> {
    reference.check_same_shape(estimate, "sam")?;
    let n = reference.pixels();
    let bands = reference.bands();
    let (rd, ed) = (reference.data(), estimate.data());
    let mut total = 0.0;
    let mut valid = 0usize;
    for p in 0..n {
        let (mut dot, mut nr, mut ne) = (0.0, 0.0, 0.0);
        for b in 0..bands {
            let (r, e) = (rd[b * n + p], ed[b * n + p]);
            dot += r * e;
            nr += r * r;
            ne += e * e;
        }
        if nr == 0.0 || ne == 0.0 {
            continue;
        }
        let cos = (dot / (nr.sqrt() * ne.sqrt())).clamp(-1.0, 1.0);
        total += cos.acos().to_degrees();
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::invalid("sam: every pixel has a zero spectrum"));
    }
    Ok(total / valid as f64)
}

pub fn ergas(reference: &HsiCube, estimate: &HsiCube, factor: usize) -> Result<f64> {
    reference.check_same_shape(estimate, "ergas")?;
    if factor == 0 {
        return Err(Error::invalid("ergas: factor must be positive"));
    }
    let mse = band_mse(reference, estimate);
    let mut acc = 0.0;
    for (b, m) in mse.iter().enumerate() {
        let band = reference.band(b);
        let mu = band.iter().sum::<f64>() / band.len() as f64;
        if mu == 0.0 {
            return Err(Error::invalid(format!("ergas: reference band {b} has zero mean")));
        }
        acc += m / (mu * mu);
    }
    Ok(100.0 / factor as f64 * (acc / mse.len() as f64).sqrt())
}

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-0.5 * ((i as f64 - r) / SSIM_SIGMA).powi(2)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Separable 'valid' filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().enumerate().map(|(t, c)| c * plane[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(t, c)| c * tmp[(y + t) * ow + x]).sum();
        }
    }
    out
}

pub fn ssim(reference: &HsiCube, estimate: &HsiCube) -> Result<f64> {
    reference.check_same_shape(estimate, "ssim")?;
    let (bands, h, w) = reference.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim: image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let taps = gaussian_taps();
    let mut total = 0.0;
    for b in 0..bands {
        let (x, y) = (reference.band(b), estimate.band(b));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(a, c)| a * c).collect();
        let mx = filter_valid(x, h, w, &taps);
        let my = filter_valid(y, h, w, &taps);
        let sxx = filter_valid(&xx, h, w, &taps);
        let syy = filter_valid(&yy, h, w, &taps);
        let sxy = filter_valid(&xy, h, w, &taps);
        let mut band_sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            band_sum += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += band_sum / mx.len() as f64;
    }
    Ok(total / bands as f64)
}
