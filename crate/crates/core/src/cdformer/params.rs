use std::collections::BTreeMap;

use super::{ModelConfig, FFN_RATIO};
use crate::numerics::{DiffTensor, Element, Rng, Tape};
use crate::{Error, Result};

/// A named weight array.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Copy)]
enum Init {
    FanIn(usize),
    Zero,
    One,
    /// Relative-position table biased towards nearby pixels: `-(dy^2 + dx^2)`.
    Locality(usize),
}

fn linear(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, n_out: usize, n_in: usize, zero: bool) {
    let w = if zero { Init::Zero } else { Init::FanIn(n_in) };
    out.push((format!("{name}.weight"), vec![n_out, n_in], w));
    out.push((format!("{name}.bias"), vec![n_out], Init::Zero));
}

fn norm(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, c: usize) {
    out.push((format!("{name}.gain"), vec![c], Init::One));
    out.push((format!("{name}.bias"), vec![c], Init::Zero));
}

fn conv(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, n_out: usize, n_in: usize, zero: bool) {
    let w = if zero { Init::Zero } else { Init::FanIn(9 * n_in) };
    out.push((format!("{name}.weight"), vec![n_out, n_in, 3, 3], w));
    out.push((format!("{name}.bias"), vec![n_out], Init::Zero));
}

fn rel_bias_len(cfg: &ModelConfig) -> usize {
    (2 * cfg.window - 1).pow(2)
}

fn s2tl_layout(out: &mut Vec<(String, Vec<usize>, Init)>, p: &str, cfg: &ModelConfig) {
    let c = cfg.channels;
    norm(out, &format!("{p}.norm1"), c);
    linear(out, &format!("{p}.spatial.q"), c, c, false);
    linear(out, &format!("{p}.spatial.kv"), 2 * c, c, false);
    linear(out, &format!("{p}.spatial.proj"), c, c, true);
    out.push((format!("{p}.spatial.rel_bias"), vec![cfg.heads, rel_bias_len(cfg)], Init::Locality(2 * cfg.window - 1)));
    norm(out, &format!("{p}.norm2"), c);
    linear(out, &format!("{p}.spectral.qkv"), 3 * c, c, false);
    linear(out, &format!("{p}.spectral.proj"), c, c, true);
    out.push((format!("{p}.spectral.temperature"), vec![cfg.heads], Init::One));
    norm(out, &format!("{p}.norm3"), c);
    linear(out, &format!("{p}.ffn.expand"), 2 * FFN_RATIO * c, c, false);
    linear(out, &format!("{p}.ffn.proj"), c, FFN_RATIO * c, true);
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let c = cfg.channels;
    let mut out = Vec::new();
    conv(&mut out, "sr.embed", c, cfg.bands + cfg.msi_bands, false);
    for l in 0..cfg.layers {
        s2tl_layout(&mut out, &format!("sr.blocks.{l}"), cfg);
    }
    conv(&mut out, "ds.embed", c, cfg.bands, false);
    for l in 0..cfg.layers {
        let p = format!("ds.blocks.{l}");
        // zero so every block starts as an unconditioned S2TL
        linear(&mut out, &format!("{p}.nle"), 2 * c, c, true);
        norm(&mut out, &format!("{p}.norm_q"), c);
        norm(&mut out, &format!("{p}.norm_kv"), c);
        linear(&mut out, &format!("{p}.cross.q"), c, c, false);
        linear(&mut out, &format!("{p}.cross.kv"), 2 * c, c, false);
        // random, not zero: the guidance path has to carry signal from the first step
        linear(&mut out, &format!("{p}.cross.proj"), c, c, false);
        out.push((format!("{p}.cross.rel_bias"), vec![cfg.heads, rel_bias_len(cfg)], Init::Locality(2 * cfg.window - 1)));
        s2tl_layout(&mut out, &format!("{p}.s2tl"), cfg);
    }
    conv(&mut out, "recon", cfg.bands, c, true);
    out
}

/// Every learnable array of a model, keyed by hierarchical name.
///
/// Values are held in `f64` but kept on the `f32` grid (see
/// [`ModelParams::round_to_f32`]) so checkpoints store them losslessly.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: BTreeMap<String, ParamTensor>,
}

impl ModelParams {
    /// Uniform fan-in initialisation, `U(-sqrt(3/fan_in), sqrt(3/fan_in))`, for
    /// projections and convolutions; zeros for biases, the noise-level
    /// transforms, the self-attention and FFN output projections and the
    /// reconstruction head; ones for norm gains and attention temperatures;
    /// relative-position tables start at `-(dy^2 + dx^2)` to favour nearby
    /// pixels.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in layout(&config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zero => vec![0.0; n],
                Init::One => vec![1.0; n],
                Init::FanIn(fan) => {
                    let limit = (3.0 / fan as f64).sqrt();
                    (0..n).map(|_| (rng.uniform() * 2.0 - 1.0) * limit).collect()
                }
                Init::Locality(side) => {
                    let r = (side / 2) as f64;
                    (0..n)
                        .map(|i| {
                            let k = i % (side * side);
                            let (dy, dx) = ((k / side) as f64 - r, (k % side) as f64 - r);
                            -(dy * dy + dx * dx)
                        })
                        .collect()
                }
            };
            tensors.insert(name, ParamTensor { shape, data });
        }
        let mut p = Self { config, tensors };
        p.round_to_f32();
        Ok(p)
    }

    /// Assembles parameters from a loaded table, checking it against the
    /// layout implied by `config`.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, ParamTensor>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != tensors.len() {
            return Err(Error::Format(format!(
                "parameter table has {} entries, model needs {}",
                tensors.len(),
                expected.len()
            )));
        }
        for (name, shape, _) in &expected {
            match tensors.get(name) {
                None => return Err(Error::Format(format!("missing parameter {name}"))),
                Some(t) if &t.shape != shape || t.data.len() != shape.iter().product::<usize>() => {
                    return Err(Error::Format(format!("parameter {name} has shape {:?}, expected {shape:?}", t.shape)))
                }
                Some(t) if t.data.iter().any(|v| !v.is_finite()) => {
                    return Err(Error::Format(format!("parameter {name} holds non-finite values")))
                }
                _ => {}
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, ParamTensor> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.tensors.values().map(ParamTensor::len).sum()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamTensor)> {
        self.tensors.iter_mut()
    }

    /// Snaps every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Names of residual-branch output projections and the reconstruction head.
    pub fn is_final_projection(name: &str) -> bool {
        name.starts_with("recon.") || name.contains(".proj.")
    }

    /// Records every parameter on `tape`: as a differentiable leaf when
    /// `trainable(name)` holds, otherwise as a constant.
    pub fn bind<T: Element>(&self, tape: &mut Tape<T>, trainable: &dyn Fn(&str) -> bool) -> Result<Bound> {
        let mut map = BTreeMap::new();
        for (name, t) in &self.tensors {
            let id = tape.from_f64(&t.data, &t.shape, trainable(name))?;
            map.insert(name.clone(), id);
        }
        Ok(Bound { map })
    }
}

/// Parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    map: BTreeMap<String, DiffTensor>,
}

impl Bound {
    /// Wraps tensors already recorded on a tape, e.g. by a gradient checker.
    pub fn from_map(map: BTreeMap<String, DiffTensor>) -> Self {
        Self { map }
    }

    pub fn get(&self, name: &str) -> Result<DiffTensor> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("model has no parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DiffTensor)> {
        self.map.iter()
    }
}
