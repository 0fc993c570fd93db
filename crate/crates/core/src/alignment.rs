//! Index-mapping-vector alignment generator and distance-aware attention
//! reconstruction.
//!
//! The generator turns acoustic embeddings `e_s: [T, d]` and text
//! embeddings `e_t: [L, d]` into a non-negative per-frame alignment `delta`:
//!
//! ```text
//! alpha[i, j] = softmax_j(e_s[i] . e_t[j] / sqrt(d))
//! p[i]        = sum_j alpha[i, j] * j                  (index mapping vector)
//! delta[0]    = 0,  delta[i] = relu(p[i] - p[i-1])
//! ```
//!
//! Reconstruction turns any non-negative `delta` back into a frame/token
//! attention matrix:
//!
//! ```text
//! p'[i]          = sum_{m <= i} delta[m]
//! p_hat[i]       = (p'[i] - p'[0]) / (p'[T-1] - p'[0]) * (L - 1)
//! dist[i, j]     = (p_hat[i] - j)^2
//! alpha_hat[i,j] = softmax_i(-dist[i, j] / sigma^2)    (normalised over frames)
//! ```
//!
//! `alpha_hat` is stored frame-major `[T, L]`, so each *column* sums to one
//! and the semantic encodings are `alpha_hat^T e_s: [L, d]`.
//!
//! Sigma is kept as an unconstrained raw parameter; the kernel width used
//! is `|raw| + SIGMA_FLOOR`.

use crate::tape::{Tape, Var};
use crate::{Error, Real, Result, Tensor};

/// Added to `|sigma_raw|` to keep the kernel width positive.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Smallest accumulated-position span that can be rescaled.
pub const MIN_SPAN: f64 = 1e-6;

/// Kernel width actually used for a raw sigma parameter value.
pub fn effective_sigma(raw: f64) -> f64 {
    raw.abs() + SIGMA_FLOOR
}

/// Raw parameter value whose effective width is `sigma`.
pub fn raw_sigma(sigma: f64) -> f64 {
    (sigma - SIGMA_FLOOR).max(0.0)
}

/// Generator outputs, frame-major.
#[derive(Clone, Debug)]
pub struct AlignmentBundle<T> {
    /// `[T, L]`, rows sum to one.
    pub alpha: Tensor<T>,
    /// `[T]`, the index mapping vector.
    pub imv: Tensor<T>,
    /// `[T-1]`, raw increments `p[i] - p[i-1]`.
    pub increments: Tensor<T>,
    /// `[T]`, ReLU-gated increments with `delta[0] = 0`.
    pub delta: Tensor<T>,
}

/// Reconstruction outputs, frame-major.
#[derive(Clone, Debug)]
pub struct ReconstructionBundle<T> {
    /// `[T]`, cumulative sum of delta.
    pub positions_raw: Tensor<T>,
    /// `[T]`, positions rescaled onto `0..=L-1`.
    pub positions: Tensor<T>,
    /// `[L]`, `0..L-1`.
    pub index_vector: Tensor<T>,
    /// `[T, L]`, squared distances.
    pub distances: Tensor<T>,
    /// `[T, L]`, columns sum to one.
    pub alpha_hat: Tensor<T>,
    pub sigma_raw: T,
    pub sigma: T,
}

/// Tape handles of one alignment-generator pass.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorVars {
    pub alpha: Var,
    pub imv: Var,
    pub increments: Var,
    pub delta: Var,
}

/// Tape handles of one reconstruction pass.
#[derive(Clone, Copy, Debug)]
pub struct ReconstructionVars {
    pub positions_raw: Var,
    pub positions: Var,
    pub index_vector: Var,
    pub distances: Var,
    pub alpha_hat: Var,
    pub sigma_raw: Var,
    pub tokens: usize,
}

impl GeneratorVars {
    pub fn bundle<T: Real>(&self, tape: &Tape<T>) -> AlignmentBundle<T> {
        AlignmentBundle {
            alpha: tape.value(self.alpha).clone(),
            imv: tape.value(self.imv).clone(),
            increments: tape.value(self.increments).clone(),
            delta: tape.value(self.delta).clone(),
        }
    }
}

impl ReconstructionVars {
    pub fn bundle<T: Real>(&self, tape: &Tape<T>) -> ReconstructionBundle<T> {
        let raw = tape.value(self.sigma_raw).item();
        ReconstructionBundle {
            positions_raw: tape.value(self.positions_raw).clone(),
            positions: tape.value(self.positions).clone(),
            index_vector: tape.value(self.index_vector).clone(),
            distances: tape.value(self.distances).clone(),
            alpha_hat: tape.value(self.alpha_hat).clone(),
            sigma_raw: raw,
            sigma: T::of(effective_sigma(raw.f64())),
        }
    }
}

/// Scaled dot-product attention `[T, L]` with acoustic frames as queries
/// and text tokens as keys.
pub fn compute_attention<T: Real>(tape: &Tape<T>, e_s: Var, e_t: Var) -> Result<Var> {
    let (ss, ts) = (tape.shape(e_s), tape.shape(e_t));
    if ss.len() != 2 || ts.len() != 2 || ss[1] != ts[1] {
        return Err(Error::dim(
            "compute_attention",
            format!("acoustic {ss:?} vs text {ts:?}"),
        ));
    }
    if ss[0] == 0 || ts[0] == 0 {
        return Err(Error::Input("attention needs T >= 1 and L >= 1".into()));
    }
    let kt = tape.transpose(e_t)?;
    let logits = tape.matmul(e_s, kt)?;
    let logits = tape.scale(logits, (ss[1] as f64).powf(-0.5));
    Ok(tape.row_softmax(logits))
}

/// `p = alpha . [0, 1, ..., L-1]`, shape `[T]`.
pub fn compute_imv<T: Real>(tape: &Tape<T>, alpha: Var) -> Result<Var> {
    let shape = tape.shape(alpha);
    if shape.len() != 2 {
        return Err(Error::dim("compute_imv", format!("{shape:?}")));
    }
    let index = tape.constant(Tensor::arange(shape[1]).reshape(&[shape[1], 1])?);
    let p = tape.matmul(alpha, index)?;
    tape.reshape(p, &[shape[0]])
}

/// Raw increments `[T-1]` and gated alignment `delta: [T]`.
pub fn imv_increments<T: Real>(tape: &Tape<T>, p: Var) -> Result<(Var, Var)> {
    let t = match tape.shape(p)[..] {
        [t] if t >= 1 => t,
        ref s => return Err(Error::dim("imv_increments", format!("{s:?}"))),
    };
    let head = tape.slice(p, 1, t - 1)?;
    let tail = tape.slice(p, 0, t - 1)?;
    let increments = tape.sub(head, tail)?;
    let gated = tape.relu(increments);
    let zero = tape.constant(Tensor::zeros(&[1]));
    let delta = tape.concat(&[zero, gated])?;
    Ok((increments, delta))
}

/// Inclusive cumulative sum of the alignment.
pub fn accumulate_positions<T: Real>(tape: &Tape<T>, delta: Var) -> Var {
    tape.cumsum_last(delta)
}

/// Rescales accumulated positions so they run from 0 to `tokens - 1`.
///
/// Fails with [`Error::DegenerateAlignment`] if the positions advance by no
/// more than [`MIN_SPAN`] over the utterance.
pub fn scale_positions<T: Real>(tape: &Tape<T>, p_raw: Var, tokens: usize) -> Result<Var> {
    let t = match tape.shape(p_raw)[..] {
        [t] => t,
        ref s => return Err(Error::dim("scale_positions", format!("{s:?}"))),
    };
    if tokens == 0 {
        return Err(Error::Input("scale_positions needs L >= 1".into()));
    }
    let span_value = if t >= 2 {
        let v = tape.value(p_raw);
        (v.data()[t - 1] - v.data()[0]).f64()
    } else {
        0.0
    };
    if !(span_value > MIN_SPAN) {
        return Err(Error::DegenerateAlignment {
            span: span_value,
            example: None,
        });
    }
    let first = tape.slice(p_raw, 0, 1)?;
    let last = tape.slice(p_raw, t - 1, 1)?;
    let span = tape.sub(last, first)?;
    let first_b = tape.expand(first, &[t])?;
    let span_b = tape.expand(span, &[t])?;
    let shifted = tape.sub(p_raw, first_b)?;
    let unit = tape.div(shifted, span_b)?;
    Ok(tape.scale(unit, (tokens - 1) as f64))
}

/// Squared distances `[T, L]` and column-normalised Gaussian attention.
pub fn reconstruct_attention<T: Real>(
    tape: &Tape<T>,
    p_hat: Var,
    tokens: usize,
    sigma_raw: Var,
) -> Result<(Var, Var, Var)> {
    let shape = tape.shape(p_hat);
    if shape.len() != 1 {
        return Err(Error::dim("reconstruct_attention", format!("{shape:?}")));
    }
    if tape.value(sigma_raw).len() != 1 {
        return Err(Error::dim("reconstruct_attention", "sigma must be a scalar"));
    }
    let index_vector = tape.constant(Tensor::arange(tokens));
    let distances = tape.squared_distances(p_hat, tokens)?;
    let alpha_hat = tape.gaussian_column_softmax(distances, sigma_raw, SIGMA_FLOOR)?;
    Ok((index_vector, distances, alpha_hat))
}

/// Cumulative sum, rescaling and reconstruction for an alignment `delta`.
pub fn reconstruct_from_delta<T: Real>(
    tape: &Tape<T>,
    delta: Var,
    tokens: usize,
    sigma_raw: Var,
) -> Result<ReconstructionVars> {
    let positions_raw = accumulate_positions(tape, delta);
    let positions = scale_positions(tape, positions_raw, tokens)?;
    reconstruct_at(tape, positions_raw, positions, tokens, sigma_raw)
}

/// Reconstruction at already-scaled positions.
pub fn reconstruct_at<T: Real>(
    tape: &Tape<T>,
    positions_raw: Var,
    positions: Var,
    tokens: usize,
    sigma_raw: Var,
) -> Result<ReconstructionVars> {
    let (index_vector, distances, alpha_hat) =
        reconstruct_attention(tape, positions, tokens, sigma_raw)?;
    Ok(ReconstructionVars {
        positions_raw,
        positions,
        index_vector,
        distances,
        alpha_hat,
        sigma_raw,
        tokens,
    })
}

/// `alpha_hat^T e_s: [L, d]`.
pub fn semantic_encodings<T: Real>(tape: &Tape<T>, alpha_hat: Var, e_s: Var) -> Result<Var> {
    tape.matmul_tn(alpha_hat, e_s)
}

/// Alignment generator only: attention, IMV, increments and gated delta.
pub fn generate_alignment<T: Real>(tape: &Tape<T>, e_s: Var, e_t: Var) -> Result<GeneratorVars> {
    let alpha = compute_attention(tape, e_s, e_t)?;
    let imv = compute_imv(tape, alpha)?;
    let (increments, delta) = imv_increments(tape, imv)?;
    Ok(GeneratorVars {
        alpha,
        imv,
        increments,
        delta,
    })
}

/// Handles of the full generator pass.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorOutput {
    pub alignment: GeneratorVars,
    pub reconstruction: ReconstructionVars,
    /// `[L, d]`.
    pub semantic: Var,
}

/// Generator, reconstruction and the semantic product, end to end.
pub fn generator_forward<T: Real>(
    tape: &Tape<T>,
    e_s: Var,
    e_t: Var,
    sigma_raw: Var,
) -> Result<GeneratorOutput> {
    let alignment = generate_alignment(tape, e_s, e_t)?;
    let tokens = tape.shape(e_t)[0];
    let reconstruction = reconstruct_from_delta(tape, alignment.delta, tokens, sigma_raw)?;
    let semantic = semantic_encodings(tape, reconstruction.alpha_hat, e_s)?;
    Ok(GeneratorOutput {
        alignment,
        reconstruction,
        semantic,
    })
}

/// Value-level convenience wrapper around [`generator_forward`].
pub fn generator_forward_values<T: Real>(
    e_s: &Tensor<T>,
    e_t: &Tensor<T>,
    sigma_raw: T,
) -> Result<(AlignmentBundle<T>, ReconstructionBundle<T>, Tensor<T>)> {
    let tape = Tape::new();
    let s = tape.constant(e_s.clone());
    let t = tape.constant(e_t.clone());
    let sigma = tape.constant(Tensor::scalar(sigma_raw));
    let out = generator_forward(&tape, s, t, sigma)?;
    let semantic = tape.value(out.semantic).clone();
    Ok((
        out.alignment.bundle(&tape),
        out.reconstruction.bundle(&tape),
        semantic,
    ))
}
