//! Checkpoint file layout (little-endian):
//!
//! ```text
//! "HSRD" u16 version
//! model:    u32 channels, layers, heads, window, bands, msi_bands; f64 nle_scale; u8 residual
//! params:   table
//! optim:    u64 adam step, u64 global step, table m, table v
//! schedule: u32 T, f64 alpha[T], f64 gamma[T+1]
//! table:    u32 count, then per entry u16 name length, name, u8 rank, u32 dims[rank], f32 data
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::OptimState;
use crate::cdformer::{ModelConfig, ModelParams, ParamTensor, Residual};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"HSRD";
const VERSION: u16 = 1;

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub opt: OptimState,
    pub global_step: u64,
    pub schedule: NoiseSchedule,
}

fn put_table<'a>(out: &mut Vec<u8>, entries: impl ExactSizeIterator<Item = (&'a String, &'a [usize], &'a [f64])>) {
    out.extend((entries.len() as u32).to_le_bytes());
    for (name, shape, data) in entries {
        out.extend((name.len() as u16).to_le_bytes());
        out.extend(name.as_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend((d as u32).to_le_bytes());
        }
        for &v in data {
            out.extend((v as f32).to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    let c = ck.params.config();
    for v in [c.channels, c.layers, c.heads, c.window, c.bands, c.msi_bands] {
        out.extend((v as u32).to_le_bytes());
    }
    out.extend(c.nle_scale.to_le_bytes());
    out.push(match c.residual {
        Residual::Upsampled => 0,
        Residual::Noisy => 1,
    });
    let tensors = ck.params.tensors();
    put_table(&mut out, tensors.iter().map(|(k, t)| (k, t.shape.as_slice(), t.data.as_slice())));
    out.extend(ck.opt.step.to_le_bytes());
    out.extend(ck.global_step.to_le_bytes());
    for moments in [&ck.opt.m, &ck.opt.v] {
        put_table(
            &mut out,
            moments.iter().map(|(k, v)| (k, tensors[k].shape.as_slice(), v.as_slice())),
        );
    }
    out.extend((ck.schedule.steps() as u32).to_le_bytes());
    for v in ck.schedule.alphas().iter().chain(ck.schedule.gammas()) {
        out.extend(v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn table(&mut self) -> Result<BTreeMap<String, ParamTensor>> {
        let count = self.u32()? as usize;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let len = self.u16()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = self.u8()? as usize;
            let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::Format(format!("parameter {name} is too large")))?;
            let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            if out.insert(name.clone(), ParamTensor { shape, data }).is_some() {
                return Err(Error::Format(format!("duplicate parameter {name}")));
            }
        }
        Ok(out)
    }
}

fn moments(table: BTreeMap<String, ParamTensor>, params: &ModelParams, what: &str) -> Result<BTreeMap<String, Vec<f64>>> {
    if table.len() != params.tensors().len() {
        return Err(Error::Format(format!("{what} table does not cover the parameters")));
    }
    let mut out = BTreeMap::new();
    for (name, t) in table {
        match params.get(&name) {
            Some(p) if p.shape == t.shape => {}
            _ => return Err(Error::Format(format!("{what} entry {name} does not match any parameter"))),
        }
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("{what} entry {name} is not finite")));
        }
        out.insert(name, t.data);
    }
    Ok(out)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let nle_scale = r.f64()?;
    let residual = match r.u8()? {
        0 => Residual::Upsampled,
        1 => Residual::Noisy,
        v => return Err(Error::Format(format!("unknown residual code {v}"))),
    };
    let config = ModelConfig {
        channels: dims[0],
        layers: dims[1],
        heads: dims[2],
        window: dims[3],
        bands: dims[4],
        msi_bands: dims[5],
        nle_scale,
        residual,
    };
    config.validate().map_err(|e| Error::Format(format!("stored model config is invalid: {e}")))?;
    let params = ModelParams::from_tensors(config, r.table()?)?;
    let adam_step = r.u64()?;
    let global_step = r.u64()?;
    let m = moments(r.table()?, &params, "first-moment")?;
    let v = moments(r.table()?, &params, "second-moment")?;
    let steps = r.u32()? as usize;
    let alpha = (0..steps).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let gamma = (0..=steps).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let schedule = NoiseSchedule::from_alphas(alpha).map_err(|e| Error::Format(format!("stored schedule: {e}")))?;
    if schedule.gammas() != gamma.as_slice() {
        return Err(Error::Format("stored gamma table disagrees with its alphas".into()));
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", buf.len() - r.pos)));
    }
    Ok(Checkpoint { params, opt: OptimState { step: adam_step, m, v }, global_step, schedule })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
