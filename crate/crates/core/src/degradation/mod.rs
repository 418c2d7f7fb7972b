//! Observation model `X = R Z`, `Y = Z D`, synthetic scenes and cube files.

mod cube;
mod io;
mod response;
mod scene;
mod spatial;

pub use cube::HsiCube;
pub use io::{decode_cube, encode_cube, load_cube, load_response, save_cube, save_response};
pub use response::{apply_spectral_response, SpectralResponse};
pub use scene::{synthesize_scene, synthesize_scene_parts, SceneConfig, SceneParts};
pub use spatial::{apply_spatial_degradation, upsample_bilinear, SpatialDegradation};

use crate::Result;

/// Synthesises the observed pair from a ground-truth cube:
/// `x = R z` (high-resolution multispectral), `y = z D` (low-resolution hyperspectral).
pub fn make_pair(
    z: &HsiCube,
    r: &SpectralResponse,
    d: &SpatialDegradation,
) -> Result<(HsiCube, HsiCube, HsiCube)> {
    let x = apply_spectral_response(z, r)?;
    let y = apply_spatial_degradation(z, d)?;
    Ok((x, y, z.clone()))
}

#[cfg(test)]
mod tests;
