use crate::{Error, Result};

/// Band-major hyperspectral (or multispectral) image: `data[(b * height + y) * width + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    bands: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl HsiCube {
    pub fn new(bands: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let n = bands
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Error::invalid("cube dimensions overflow"))?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "cube {bands}x{height}x{width} needs {n} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite cube value at index {i}")));
        }
        Ok(Self { bands, height, width, data })
    }

    pub fn zeros(bands: usize, height: usize, width: usize) -> Self {
        Self { bands, height, width, data: vec![0.0; bands * height * width] }
    }

    pub fn filled(bands: usize, height: usize, width: usize, value: f64) -> Self {
        Self { bands, height, width, data: vec![value; bands * height * width] }
    }

    pub fn from_fn(bands: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(bands * height * width);
        for b in 0..bands {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(b, y, x));
                }
            }
        }
        Self { bands, height, width, data }
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(bands, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.bands, self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn band(&self, b: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn get(&self, b: usize, y: usize, x: usize) -> f64 {
        self.data[(b * self.height + y) * self.width + x]
    }

    /// Spectrum at pixel `(y, x)`.
    pub fn spectrum(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.bands).map(|b| self.get(b, y, x)).collect()
    }

    pub fn check_same_shape(&self, other: &HsiCube, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> HsiCube {
        HsiCube {
            bands: self.bands,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Clamps every value into `[0, 1]`.
    pub fn clamp01(&self) -> HsiCube {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Rounds every value to the nearest `f32`, the precision of cube files.
    pub fn quantize_f32(&self) -> HsiCube {
        self.map(|v| v as f32 as f64)
    }

    /// Spatial crop of `h x w` pixels starting at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<HsiCube> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::shape(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(HsiCube::from_fn(self.bands, h, w, |b, y, x| self.get(b, y0 + y, x0 + x)))
    }

    /// Appends the bands of `other` after those of `self`.
    pub fn stack_bands(&self, other: &HsiCube) -> Result<HsiCube> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(format!(
                "cannot stack {}x{} with {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(HsiCube { bands: self.bands + other.bands, height: self.height, width: self.width, data })
    }
}
