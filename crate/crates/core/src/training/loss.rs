use std::collections::HashMap;
use std::sync::Arc;

use super::PatchTriple;
use crate::degradation::{HsiCube, SpatialDegradation, SpectralResponse};
use crate::numerics::{DiffTensor, Element, SparseMatrix, Tape};
use crate::{Error, Result};

/// Degradation operators for the loss, with the sparse blur matrix cached
/// per patch size.
#[derive(Clone, Debug)]
pub struct LossContext {
    pub response: SpectralResponse,
    pub degradation: SpatialDegradation,
    blur: HashMap<(usize, usize), Arc<SparseMatrix>>,
}

impl LossContext {
    pub fn new(response: SpectralResponse, degradation: SpatialDegradation) -> Self {
        Self { response, degradation, blur: HashMap::new() }
    }

    /// Builds the blur matrix for `h x w` patches if not cached yet.
    pub fn prepare(&mut self, h: usize, w: usize) -> Result<()> {
        if !self.blur.contains_key(&(h, w)) {
            let m = self.degradation.sparse_matrix(h, w)?;
            self.blur.insert((h, w), Arc::new(m));
        }
        Ok(())
    }

    fn blur(&self, h: usize, w: usize) -> Result<Arc<SparseMatrix>> {
        match self.blur.get(&(h, w)) {
            Some(m) => Ok(m.clone()),
            None => Ok(Arc::new(self.degradation.sparse_matrix(h, w)?)),
        }
    }
}

/// `mean|X - R Zh| + mean_mask|Y - Zh D| + mean|Z - Zh|` for a prediction
/// `z0_hat` of shape `[B, H, W]` recorded on `tape`. The middle term averages
/// over bands and the masked low-resolution pixels only and vanishes when the
/// mask is empty.
pub fn loss_on_tape<T: Element>(
    tape: &mut Tape<T>,
    z0_hat: DiffTensor,
    target: &PatchTriple,
    ctx: &LossContext,
) -> Result<DiffTensor> {
    let (b, h, w) = target.z.dims();
    if tape.shape(z0_hat) != [b, h, w] {
        return Err(Error::shape(format!("prediction {:?} does not match truth {:?}", tape.shape(z0_hat), (b, h, w))));
    }
    if ctx.response.bands() != b || target.x.dims() != (ctx.response.msi_bands(), h, w) {
        return Err(Error::shape("multispectral target does not match the spectral response".to_string()));
    }
    let f = ctx.degradation.factor();
    if target.y.dims() != (b, h / f, w / f) || target.mask.len() != (h / f) * (w / f) {
        return Err(Error::shape("low-resolution target does not match the degradation".to_string()));
    }
    let n = h * w;
    let flat = tape.reshape(z0_hat, &[b, n])?;

    let r = tape.from_f64(ctx.response.matrix(), &[ctx.response.msi_bands(), b], false)?;
    let rz = tape.matmul(r, flat)?;
    let x = tape.from_f64(target.x.data(), &[ctx.response.msi_bands(), n], false)?;
    let dx = tape.sub(x, rz)?;
    let dx = tape.abs(dx);
    let term_x = tape.mean(dx);

    let z = tape.from_f64(target.z.data(), &[b, n], false)?;
    let dz = tape.sub(z, flat)?;
    let dz = tape.abs(dz);
    let term_z = tape.mean(dz);
    let mut loss = tape.add(term_x, term_z)?;

    let valid = target.mask.iter().filter(|&&m| m).count();
    if valid > 0 {
        let zd = tape.sparse_apply(flat, ctx.blur(h, w)?)?;
        let y = tape.from_f64(target.y.data(), &[b, n / (f * f)], false)?;
        let dy = tape.sub(y, zd)?;
        let dy = tape.abs(dy);
        let mask: Vec<f64> = target.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let mask = tape.from_f64(&mask, &[1, n / (f * f)], false)?;
        let dy = tape.mul(dy, mask)?;
        let s = tape.sum(dy);
        let term_y = tape.scale(s, 1.0 / (b * valid) as f64);
        loss = tape.add(loss, term_y)?;
    }
    Ok(loss)
}

/// The objective for a whole image (every low-resolution pixel counted).
pub fn loss_eq8(
    z0_hat: &HsiCube,
    z0: &HsiCube,
    x: &HsiCube,
    y: &HsiCube,
    r: &SpectralResponse,
    d: &SpatialDegradation,
) -> Result<f64> {
    let mask = vec![true; y.pixels()];
    loss_eq8_masked(z0_hat, z0, x, y, &mask, r, d)
}

pub fn loss_eq8_masked(
    z0_hat: &HsiCube,
    z0: &HsiCube,
    x: &HsiCube,
    y: &HsiCube,
    mask: &[bool],
    r: &SpectralResponse,
    d: &SpatialDegradation,
) -> Result<f64> {
    z0_hat.check_same_shape(z0, "loss prediction")?;
    let ctx = LossContext::new(r.clone(), d.clone());
    let target = PatchTriple { x: x.clone(), y: y.clone(), z: z0.clone(), mask: mask.to_vec() };
    let mut tape = Tape::<f64>::new();
    let p = tape.from_f64(z0_hat.data(), &[z0_hat.bands(), z0_hat.height(), z0_hat.width()], false)?;
    let l = loss_on_tape(&mut tape, p, &target, &ctx)?;
    Ok(tape.item(l))
}
