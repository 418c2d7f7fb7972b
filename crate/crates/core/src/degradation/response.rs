use super::HsiCube;
use crate::{Error, Result};

/// Spectral response `R` (`msi_bands x bands`, row-major), one row per
/// multispectral band. Rows are non-negative and sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralResponse {
    msi_bands: usize,
    bands: usize,
    matrix: Vec<f64>,
}

impl SpectralResponse {
    pub fn new(msi_bands: usize, bands: usize, matrix: Vec<f64>) -> Result<Self> {
        if msi_bands == 0 || bands == 0 {
            return Err(Error::invalid("spectral response needs at least one row and column"));
        }
        if msi_bands > bands {
            return Err(Error::invalid(format!(
                "spectral response has more MSI bands ({msi_bands}) than HSI bands ({bands})"
            )));
        }
        if matrix.len() != msi_bands * bands {
            return Err(Error::shape(format!(
                "response {msi_bands}x{bands} needs {} weights, got {}",
                msi_bands * bands,
                matrix.len()
            )));
        }
        if matrix.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::invalid("spectral response weights must be finite and non-negative"));
        }
        for (i, row) in matrix.chunks(bands).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("response row {i} sums to {s}, expected 1")));
            }
        }
        Ok(Self { msi_bands, bands, matrix })
    }

    /// Smooth bump rows spread evenly over the spectrum, a stand-in for
    /// RGB/NIR sensor integration curves.
    pub fn smooth_default(msi_bands: usize, bands: usize) -> Result<Self> {
        if msi_bands == 0 {
            return Err(Error::invalid("need at least one MSI band"));
        }
        let width = (bands as f64 / msi_bands as f64).max(1.0) * 0.6;
        let mut m = Vec::with_capacity(msi_bands * bands);
        for k in 0..msi_bands {
            let centre = (k as f64 + 0.5) / msi_bands as f64 * bands as f64 - 0.5;
            let row: Vec<f64> = (0..bands)
                .map(|j| (-0.5 * ((j as f64 - centre) / width).powi(2)).exp())
                .collect();
            let s: f64 = row.iter().sum();
            m.extend(row.iter().map(|v| v / s));
        }
        Self::new(msi_bands, bands, m)
    }

    pub fn identity(bands: usize) -> Self {
        let mut m = vec![0.0; bands * bands];
        for i in 0..bands {
            m[i * bands + i] = 1.0;
        }
        Self { msi_bands: bands, bands, matrix: m }
    }

    pub fn msi_bands(&self) -> usize {
        self.msi_bands
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.bands..(i + 1) * self.bands]
    }
}

/// Per-pixel `X = R Z`.
pub fn apply_spectral_response(z: &HsiCube, r: &SpectralResponse) -> Result<HsiCube> {
    if z.bands() != r.bands() {
        return Err(Error::shape(format!(
            "response expects {} bands, cube has {}",
            r.bands(),
            z.bands()
        )));
    }
    let n = z.pixels();
    let mut out = HsiCube::zeros(r.msi_bands(), z.height(), z.width());
    for i in 0..r.msi_bands() {
        let dst = out.band_mut(i);
        for (j, &wgt) in r.row(i).iter().enumerate() {
            if wgt == 0.0 {
                continue;
            }
            let src = z.band(j);
            for p in 0..n {
                dst[p] += wgt * src[p];
            }
        }
    }
    Ok(out)
}
