use std::collections::BTreeMap;

use super::HsiCube;
use crate::numerics::{reflect_index, SparseMatrix};
use crate::{Error, Result};

/// Spatial degradation `D`: separable Gaussian blur with reflective borders,
/// then stride-`factor` subsampling at offset `factor / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialDegradation {
    factor: usize,
    sigma: f64,
    /// One-dimensional taps; the 2-D kernel is their outer product.
    taps: Vec<f64>,
}

impl SpatialDegradation {
    /// Blur sigma of `factor / 2`, truncated at four sigma.
    pub fn new(factor: usize) -> Result<Self> {
        Self::with_sigma(factor, factor as f64 / 2.0)
    }

    pub fn with_sigma(factor: usize, sigma: f64) -> Result<Self> {
        if factor < 2 {
            return Err(Error::invalid(format!("down-sampling factor must be >= 2, got {factor}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("blur sigma must be positive, got {sigma}")));
        }
        let radius = (4.0 * sigma).ceil() as isize;
        let raw: Vec<f64> = (-radius..=radius)
            .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        Ok(Self { factor, sigma, taps: raw.iter().map(|v| v / s).collect() })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.taps.len() / 2
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Full `K x K` blur kernel, row-major.
    pub fn kernel_2d(&self) -> Vec<f64> {
        self.taps.iter().flat_map(|&a| self.taps.iter().map(move |&b| a * b)).collect()
    }

    /// High-resolution coordinate sampled by low-resolution index `i`.
    pub fn sample_offset(&self, i: usize) -> usize {
        i * self.factor + self.factor / 2
    }

    fn check_divisible(&self, h: usize, w: usize) -> Result<()> {
        if h % self.factor != 0 || w % self.factor != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "image {h}x{w} is not divisible by factor {}",
                self.factor
            )));
        }
        Ok(())
    }

    /// Degrades a single `h x w` plane.
    pub fn apply_plane(&self, plane: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
        self.check_divisible(h, w)?;
        let (lh, lw) = (h / self.factor, w / self.factor);
        let r = self.radius() as isize;
        // horizontal pass at the sampled columns only
        let mut rows = vec![0.0; h * lw];
        for y in 0..h {
            let src = &plane[y * w..(y + 1) * w];
            for j in 0..lw {
                let cx = self.sample_offset(j) as isize;
                rows[y * lw + j] = self
                    .taps
                    .iter()
                    .enumerate()
                    .map(|(t, &k)| k * src[reflect_index(cx + t as isize - r, w)])
                    .sum();
            }
        }
        let mut out = vec![0.0; lh * lw];
        for i in 0..lh {
            let cy = self.sample_offset(i) as isize;
            for (t, &k) in self.taps.iter().enumerate() {
                let sy = reflect_index(cy + t as isize - r, h);
                for j in 0..lw {
                    out[i * lw + j] += k * rows[sy * lw + j];
                }
            }
        }
        Ok(out)
    }

    /// The degradation of one `h x w` plane as a sparse `(h/f * w/f) x (h * w)` map.
    pub fn sparse_matrix(&self, h: usize, w: usize) -> Result<SparseMatrix> {
        self.check_divisible(h, w)?;
        let (lh, lw) = (h / self.factor, w / self.factor);
        let r = self.radius() as isize;
        let mut rows = Vec::with_capacity(lh * lw);
        for i in 0..lh {
            let cy = self.sample_offset(i) as isize;
            for j in 0..lw {
                let cx = self.sample_offset(j) as isize;
                let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
                for (ty, &ky) in self.taps.iter().enumerate() {
                    let sy = reflect_index(cy + ty as isize - r, h);
                    for (tx, &kx) in self.taps.iter().enumerate() {
                        let sx = reflect_index(cx + tx as isize - r, w);
                        *acc.entry(sy * w + sx).or_insert(0.0) += ky * kx;
                    }
                }
                rows.push(acc.into_iter().collect());
            }
        }
        Ok(SparseMatrix { n_in: h * w, n_out: lh * lw, rows })
    }

    /// Which low-resolution pixels of a patch can be reproduced exactly by
    /// degrading the matching high-resolution patch.
    ///
    /// The patch covers `patch_h x patch_w` high-resolution pixels starting at
    /// `(y0, x0)` of a `full_h x full_w` image. A pixel qualifies when its blur
    /// support stays inside the patch on every side, or reaches a side that is
    /// also an image border (reflection then agrees).
    pub fn consistent_lr_pixels(
        &self,
        (y0, x0): (usize, usize),
        (patch_h, patch_w): (usize, usize),
        (full_h, full_w): (usize, usize),
    ) -> Result<Vec<bool>> {
        self.check_divisible(patch_h, patch_w)?;
        let r = self.radius();
        let axis_ok = |i: usize, start: usize, len: usize, full: usize| {
            let c = self.sample_offset(i);
            let low_ok = c >= r || start == 0;
            let high_ok = c + r < len || start + len == full;
            low_ok && high_ok
        };
        let (lh, lw) = (patch_h / self.factor, patch_w / self.factor);
        let mut mask = Vec::with_capacity(lh * lw);
        for i in 0..lh {
            for j in 0..lw {
                mask.push(axis_ok(i, y0, patch_h, full_h) && axis_ok(j, x0, patch_w, full_w));
            }
        }
        Ok(mask)
    }
}

/// Band-by-band `Y = Z D`.
pub fn apply_spatial_degradation(z: &HsiCube, d: &SpatialDegradation) -> Result<HsiCube> {
    let (b, h, w) = z.dims();
    d.check_divisible(h, w)?;
    let mut data = Vec::with_capacity(b * z.pixels() / (d.factor * d.factor));
    for band in 0..b {
        data.extend(d.apply_plane(z.band(band), h, w)?);
    }
    HsiCube::new(b, h / d.factor, w / d.factor, data)
}

/// Bilinear interpolation of a low-resolution cube onto the grid it was
/// sampled from: low-resolution pixel `i` sits at high-resolution coordinate
/// `i * factor + factor / 2`; positions beyond the outermost samples are clamped.
pub fn upsample_bilinear(y: &HsiCube, factor: usize) -> HsiCube {
    let (b, lh, lw) = y.dims();
    let (h, w) = (lh * factor, lw * factor);
    let offset = (factor / 2) as f64;
    let coord = |hr: usize, n: usize| {
        let u = ((hr as f64 - offset) / factor as f64).clamp(0.0, (n - 1) as f64);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, u - i0 as f64)
    };
    let ys: Vec<_> = (0..h).map(|v| coord(v, lh)).collect();
    let xs: Vec<_> = (0..w).map(|v| coord(v, lw)).collect();
    HsiCube::from_fn(b, h, w, |band, yy, xx| {
        let (y0, y1, fy) = ys[yy];
        let (x0, x1, fx) = xs[xx];
        let top = y.get(band, y0, x0) * (1.0 - fx) + y.get(band, y0, x1) * fx;
        let bottom = y.get(band, y1, x0) * (1.0 - fx) + y.get(band, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}
