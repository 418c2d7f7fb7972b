use crate::degradation::{HsiCube, SpatialDegradation};
use crate::numerics::Rng;
use crate::{Error, Result};

/// A full training scene: multispectral image, low-resolution cube and truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: HsiCube,
    pub y: HsiCube,
    pub z: HsiCube,
}

/// A co-located crop of a [`Sample`].
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTriple {
    pub x: HsiCube,
    pub y: HsiCube,
    pub z: HsiCube,
    /// Low-resolution pixels that degrading `z` reproduces exactly.
    pub mask: Vec<bool>,
}

/// Draws `count` aligned crops of side `patch`: the low-resolution crop
/// starts at `(i, j)` and the high-resolution crops at `(i f, j f)`. A patch
/// covering the whole image returns it uncropped.
pub fn patch_sampler(
    dataset: &[Sample],
    patch: usize,
    d: &SpatialDegradation,
    rng: &mut Rng,
    count: usize,
) -> Result<Vec<PatchTriple>> {
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let f = d.factor();
    if patch == 0 || patch % f != 0 {
        return Err(Error::invalid(format!("patch size {patch} is not a multiple of the factor {f}")));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let s = &dataset[rng.int_inclusive(0, dataset.len() - 1)];
        let (_, h, w) = s.z.dims();
        let (ph, pw) = if patch >= h && patch >= w { (h, w) } else { (patch, patch) };
        if ph > h || pw > w {
            return Err(Error::invalid(format!("patch size {patch} exceeds image {h}x{w}")));
        }
        let i = rng.int_inclusive(0, (h - ph) / f);
        let j = rng.int_inclusive(0, (w - pw) / f);
        let (y0, x0) = (i * f, j * f);
        out.push(PatchTriple {
            x: s.x.crop(y0, x0, ph, pw)?,
            y: s.y.crop(i, j, ph / f, pw / f)?,
            z: s.z.crop(y0, x0, ph, pw)?,
            mask: d.consistent_lr_pixels((y0, x0), (ph, pw), (h, w))?,
        });
    }
    Ok(out)
}
