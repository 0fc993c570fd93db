//! Transformer encoder building blocks over the tape.
//!
//! Parameters are addressed by dotted names under a caller-chosen prefix,
//! e.g. `enc.0.attn.wq`.

use rand::Rng;

use crate::params::{Binder, ParamSet};
use crate::tape::Var;
use crate::{Real, Result, Tensor};

/// Standard sinusoidal position table `[len, dim]`.
pub fn sinusoidal_positions<T: Real>(len: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let angle = pos as f64 * rate;
            data.push(T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(&[len, dim], data).expect("shape matches")
}

/// Sinusoidal encodings of relative positions scaled by `gain`: row `i`
/// encodes `span * i / (len - 1)`, so sequences of different lengths share
/// one `[0, span]` scale.
pub fn relative_positions<T: Real>(len: usize, dim: usize, span: f64, gain: f64) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        let u = if len > 1 { span * pos as f64 / (len - 1) as f64 } else { 0.0 };
        for i in 0..dim {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let angle = u * rate;
            data.push(T::of(gain * if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(&[len, dim], data).expect("shape matches")
}

fn xavier<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

pub fn init_linear<T: Real>(
    ps: &mut ParamSet<T>,
    rng: &mut impl Rng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    ps.insert(format!("{prefix}.w"), xavier(rng, &[fan_in, fan_out], fan_in, fan_out))?;
    ps.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))
}

pub fn init_layer_norm<T: Real>(ps: &mut ParamSet<T>, prefix: &str, dim: usize) -> Result<()> {
    ps.insert(format!("{prefix}.gain"), Tensor::full(&[dim], T::one()))?;
    ps.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim]))
}

pub fn init_encoder_block<T: Real>(
    ps: &mut ParamSet<T>,
    rng: &mut impl Rng,
    prefix: &str,
    dim: usize,
    ffn_dim: usize,
) -> Result<()> {
    init_layer_norm(ps, &format!("{prefix}.ln1"), dim)?;
    for w in ["wq", "wk", "wv"] {
        ps.insert(format!("{prefix}.attn.{w}"), xavier(rng, &[dim, dim], dim, dim))?;
    }
    init_linear(ps, rng, &format!("{prefix}.attn.out"), dim, dim)?;
    init_layer_norm(ps, &format!("{prefix}.ln2"), dim)?;
    init_linear(ps, rng, &format!("{prefix}.ffn.up"), dim, ffn_dim)?;
    init_linear(ps, rng, &format!("{prefix}.ffn.down"), ffn_dim, dim)
}

/// `x W + b` for `x: [m, in]`.
pub fn linear<T: Real>(b: &Binder<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let tape = b.tape();
    let w = b.var(&format!("{prefix}.w"))?;
    let bias = b.var(&format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, bias)
}

pub fn layer_norm<T: Real>(b: &Binder<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let gain = b.var(&format!("{prefix}.gain"))?;
    let bias = b.var(&format!("{prefix}.bias"))?;
    b.tape().layer_norm(x, gain, bias)
}

/// Unmasked multi-head self-attention over `x: [n, dim]`.
pub fn self_attention<T: Real>(b: &Binder<'_, T>, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let tape = b.tape();
    let dim = tape.shape(x)[1];
    let hd = dim / heads;
    let q = tape.matmul(x, b.var(&format!("{prefix}.wq"))?)?;
    let k = tape.matmul(x, b.var(&format!("{prefix}.wk"))?)?;
    let v = tape.matmul(x, b.var(&format!("{prefix}.wv"))?)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let kh = tape.slice_cols(k, h * hd, hd)?;
        let vh = tape.slice_cols(v, h * hd, hd)?;
        let scores = tape.matmul(qh, tape.transpose(kh)?)?;
        let scores = tape.scale(scores, (hd as f64).powf(-0.5));
        let weights = tape.row_softmax(scores);
        outs.push(tape.matmul(weights, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    linear(b, &format!("{prefix}.out"), joined)
}

/// Pre-norm block: `x + attn(ln(x))`, then `h + ffn(ln(h))`.
pub fn encoder_block<T: Real>(b: &Binder<'_, T>, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let tape = b.tape();
    let n1 = layer_norm(b, &format!("{prefix}.ln1"), x)?;
    let a = self_attention(b, &format!("{prefix}.attn"), n1, heads)?;
    let h = tape.add(x, a)?;
    let n2 = layer_norm(b, &format!("{prefix}.ln2"), h)?;
    let up = tape.relu(linear(b, &format!("{prefix}.ffn.up"), n2)?);
    let down = linear(b, &format!("{prefix}.ffn.down"), up)?;
    tape.add(h, down)
}
