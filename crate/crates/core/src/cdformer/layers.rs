use super::params::Bound;
use super::{ModelConfig, FFN_RATIO};
use crate::numerics::{DiffTensor, Element, Tape};
use crate::{Error, Result};

/// Output of an attention block together with its attention weights.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub out: DiffTensor,
    /// Row-stochastic along the last axis.
    pub weights: DiffTensor,
}

/// Sinusoidal embedding of a noise level: entry `2i` is
/// `sin(scale * gamma / 10000^(2i/C))` and entry `2i + 1` the matching cosine.
pub fn noise_level_embedding(gamma: f64, channels: usize, scale: f64) -> Result<Vec<f64>> {
    if channels == 0 || channels % 2 != 0 {
        return Err(Error::invalid(format!("noise embedding needs an even width, got {channels}")));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid(format!("noise level {gamma} is outside (0, 1]")));
    }
    let mut out = Vec::with_capacity(channels);
    for i in 0..channels / 2 {
        let arg = scale * gamma / 10000f64.powf(2.0 * i as f64 / channels as f64);
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

fn check_features<T: Element>(tape: &Tape<T>, f: DiffTensor, cfg: &ModelConfig, what: &str) -> Result<(usize, usize)> {
    let s = tape.shape(f);
    if s.len() != 3 || s[0] != cfg.channels {
        return Err(Error::shape(format!("{what} expects [{}, h, w] features, got {s:?}", cfg.channels)));
    }
    Ok((s[1], s[2]))
}

/// `W x + b` over the channel axis of `[..., c_in, n]`.
fn linear<T: Element>(tape: &mut Tape<T>, p: &Bound, name: &str, x: DiffTensor) -> Result<DiffTensor> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let n_out = tape.shape(b)[0];
    let y = tape.matmul(w, x)?;
    let b = tape.reshape(b, &[n_out, 1])?;
    tape.add(y, b)
}

fn norm<T: Element>(tape: &mut Tape<T>, p: &Bound, name: &str, x: DiffTensor) -> Result<DiffTensor> {
    let g = p.get(&format!("{name}.gain"))?;
    let b = p.get(&format!("{name}.bias"))?;
    tape.layer_norm(x, g, b, 0)
}

/// Gather indices expanding a `[heads, (2r+1)^2]` offset table to
/// `[heads, win^2, win^2]`, with offsets clipped to `[-r, r]`.
fn rel_bias_index(heads: usize, win: usize, radius: usize) -> Vec<usize> {
    let side = 2 * radius + 1;
    let r = radius as isize;
    let t = win * win;
    let mut index = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        for a in 0..t {
            for b in 0..t {
                let dy = ((a / win) as isize - (b / win) as isize).clamp(-r, r) + r;
                let dx = ((a % win) as isize - (b % win) as isize).clamp(-r, r) + r;
                index.push(h * side * side + dy as usize * side + dx as usize);
            }
        }
    }
    index
}

/// Multi-head attention inside non-overlapping windows with queries from
/// `q_src` and keys/values from `kv_src` (both `[C, H, W]`), plus a learned
/// relative-position bias. Parameters live under `prefix`: `q`, `kv`, `proj`
/// and `rel_bias`.
pub fn window_attention<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    q_src: DiffTensor,
    kv_src: DiffTensor,
    cfg: &ModelConfig,
) -> Result<Attention> {
    let (h, w) = check_features(tape, q_src, cfg, "attention query")?;
    let hw_kv = check_features(tape, kv_src, cfg, "attention key/value")?;
    if hw_kv != (h, w) {
        return Err(Error::shape(format!("attention streams differ in size: {h}x{w} vs {}x{}", hw_kv.0, hw_kv.1)));
    }
    let (c, heads, d, win) = (cfg.channels, cfg.heads, cfg.head_dim(), cfg.window);
    let t = win * win;

    let qw = tape.window_partition(q_src, win)?;
    let n_win = tape.shape(qw)[0];
    let qw = tape.reshape(qw, &[n_win, c, t])?;
    let q = linear(tape, p, &format!("{prefix}.q"), qw)?;
    let q = tape.reshape(q, &[n_win, heads, d, t])?;
    let q = tape.transpose(q)?;

    let kvw = tape.window_partition(kv_src, win)?;
    let kvw = tape.reshape(kvw, &[n_win, c, t])?;
    let kv = linear(tape, p, &format!("{prefix}.kv"), kvw)?;
    let kv = tape.split(kv, 1, &[c, c])?;
    let k = tape.reshape(kv[0], &[n_win, heads, d, t])?;
    let v = tape.reshape(kv[1], &[n_win, heads, d, t])?;

    let logits = tape.matmul(q, k)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let table = p.get(&format!("{prefix}.rel_bias"))?;
    let ts = tape.shape(table).to_vec();
    let side = (ts[1] as f64).sqrt().round() as usize;
    if ts.len() != 2 || ts[0] != heads || side * side != ts[1] || side % 2 == 0 {
        return Err(Error::shape(format!("{prefix}.rel_bias has shape {ts:?}")));
    }
    let bias = tape.gather(table, rel_bias_index(heads, win, side / 2), vec![heads, t, t]);
    let logits = tape.add(logits, bias)?;
    let weights = tape.softmax(logits, 3)?;

    let wt = tape.transpose(weights)?;
    let o = tape.matmul(v, wt)?;
    let o = tape.reshape(o, &[n_win, c, win, win])?;
    let o = tape.window_merge(o, h, w)?;
    let o = tape.reshape(o, &[c, h * w])?;
    let o = linear(tape, p, &format!("{prefix}.proj"), o)?;
    let out = tape.reshape(o, &[c, h, w])?;
    Ok(Attention { out, weights })
}

/// Window self-attention over `f`, parameters under `{prefix}.spatial`.
pub fn spatio_msa<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    f: DiffTensor,
    cfg: &ModelConfig,
) -> Result<Attention> {
    window_attention(tape, p, &format!("{prefix}.spatial"), f, f, cfg)
}

/// Transposed (channel) attention: per head a `d x d` map from L2-normalised
/// queries and keys over all pixels, scaled by a learned temperature.
pub fn spectral_msa<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    f: DiffTensor,
    cfg: &ModelConfig,
) -> Result<Attention> {
    let (h, w) = check_features(tape, f, cfg, "spectral attention")?;
    let (c, heads, d, n) = (cfg.channels, cfg.heads, cfg.head_dim(), h * w);
    let pre = format!("{prefix}.spectral");
    let x = tape.reshape(f, &[c, n])?;
    let qkv = linear(tape, p, &format!("{pre}.qkv"), x)?;
    let parts = tape.split(qkv, 0, &[c, c, c])?;
    let q = tape.reshape(parts[0], &[heads, d, n])?;
    let k = tape.reshape(parts[1], &[heads, d, n])?;
    let v = tape.reshape(parts[2], &[heads, d, n])?;
    let q = tape.l2_normalize(q, 2, 1e-12)?;
    let k = tape.l2_normalize(k, 2, 1e-12)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let temp = p.get(&format!("{pre}.temperature"))?;
    let temp = tape.reshape(temp, &[heads, 1, 1])?;
    let logits = tape.mul(logits, temp)?;
    let weights = tape.softmax(logits, 2)?;
    let o = tape.matmul(weights, v)?;
    let o = tape.reshape(o, &[c, n])?;
    let o = linear(tape, p, &format!("{pre}.proj"), o)?;
    let out = tape.reshape(o, &[c, h, w])?;
    Ok(Attention { out, weights })
}

/// `proj(gelu(a) * g)` where `[a; g]` is a pointwise expansion of `f`.
pub fn gated_ffn<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    f: DiffTensor,
    cfg: &ModelConfig,
) -> Result<DiffTensor> {
    let (h, w) = check_features(tape, f, cfg, "feed-forward")?;
    let (c, n) = (cfg.channels, h * w);
    let hidden = FFN_RATIO * c;
    let x = tape.reshape(f, &[c, n])?;
    let e = linear(tape, p, &format!("{prefix}.ffn.expand"), x)?;
    let parts = tape.split(e, 0, &[hidden, hidden])?;
    let a = tape.gelu(parts[0]);
    let gated = tape.mul(a, parts[1])?;
    let o = linear(tape, p, &format!("{prefix}.ffn.proj"), gated)?;
    tape.reshape(o, &[c, h, w])
}

/// Pre-norm residual stack: spatial attention, spectral attention, gated FFN.
pub fn s2tl<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    f: DiffTensor,
    cfg: &ModelConfig,
) -> Result<DiffTensor> {
    let n = norm(tape, p, &format!("{prefix}.norm1"), f)?;
    let a = spatio_msa(tape, p, prefix, n, cfg)?;
    let f = tape.add(f, a.out)?;
    let n = norm(tape, p, &format!("{prefix}.norm2"), f)?;
    let a = spectral_msa(tape, p, prefix, n, cfg)?;
    let f = tape.add(f, a.out)?;
    let n = norm(tape, p, &format!("{prefix}.norm3"), f)?;
    let g = gated_ffn(tape, p, prefix, n, cfg)?;
    tape.add(f, g)
}

/// Noise-aware conditional layer: scale-and-shift by a linear map of the
/// noise embedding `nle` (`[C]`), cross-attention from the denoising features
/// to `f_sr`, then one [`s2tl`].
pub fn nc_s2tl<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    f_ds: DiffTensor,
    f_sr: DiffTensor,
    nle: DiffTensor,
    cfg: &ModelConfig,
) -> Result<DiffTensor> {
    let c = cfg.channels;
    if tape.shape(f_ds) != tape.shape(f_sr) {
        return Err(Error::shape(format!(
            "denoising features {:?} and SR features {:?} differ",
            tape.shape(f_ds),
            tape.shape(f_sr)
        )));
    }
    if tape.shape(nle) != [c] {
        return Err(Error::shape(format!("noise embedding must be [{c}], got {:?}", tape.shape(nle))));
    }
    let e = tape.reshape(nle, &[c, 1])?;
    let ss = linear(tape, p, &format!("{prefix}.nle"), e)?;
    let ss = tape.split(ss, 0, &[c, c])?;
    let scale = tape.reshape(ss[0], &[c, 1, 1])?;
    let scale = tape.add_scalar(scale, 1.0);
    let shift = tape.reshape(ss[1], &[c, 1, 1])?;
    let merged = tape.mul(f_ds, scale)?;
    let merged = tape.add(merged, shift)?;

    let q = norm(tape, p, &format!("{prefix}.norm_q"), merged)?;
    let kv = norm(tape, p, &format!("{prefix}.norm_kv"), f_sr)?;
    let a = window_attention(tape, p, &format!("{prefix}.cross"), q, kv, cfg)?;
    let f = tape.add(merged, a.out)?;
    s2tl(tape, p, &format!("{prefix}.s2tl"), f, cfg)
}
