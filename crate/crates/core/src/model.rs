//! The full transducer: acoustic encoder, text encoder, alignment
//! generator, attention reconstruction, alignment predictor and decoder.
//!
//! Training (`train_step`) runs every module; the decoder sees semantic
//! encodings built from the *generator's* alignment, while the predictor
//! learns that alignment through an MSE term:
//!
//! ```text
//! loss_total = CE(y, decoder(semantic)) + lambda * MSE(delta_star, stopgrad(delta))
//! ```
//!
//! Inference (`infer`) runs only the acoustic encoder, predictor,
//! reconstruction and decoder. The decoder is invoked exactly once per
//! utterance, whatever the predicted length.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{
    self, raw_sigma, AlignmentBundle, ReconstructionBundle, ReconstructionVars,
};
use crate::bench::StageTimes;
use crate::data::TranscriptionExample;
use crate::layers::{
    encoder_block, init_encoder_block, init_layer_norm, init_linear, layer_norm, linear,
    relative_positions, sinusoidal_positions,
};
use crate::optim::Optimizer;
use crate::params::{Binder, ParamGrads, ParamSet};
use crate::predictor::{self, init_predictor, PredictorConfig};
use crate::tape::{Tape, Var};
use crate::{Error, Real, Result, Tensor};

/// Parameter-name prefixes of each module.
pub mod prefix {
    pub const ACOUSTIC: &str = "enc";
    pub const TEXT: &str = "text";
    pub const PREDICTOR: &str = "pred";
    pub const DECODER: &str = "dec";
    pub const SIGMA: &str = "sigma";
}

/// Default for [`ModelConfig::position_span`].
pub const POSITION_SPAN: f64 = 16.0;

/// Amplitude of the encoders' relative position encodings.
pub const POSITION_GAIN: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub vocab_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub text_encoder_layers: usize,
    pub decoder_layers: usize,
    pub predictor: PredictorConfig,
    /// Weight of the alignment loss.
    pub lambda: f64,
    /// Initial reconstruction kernel width.
    pub sigma_init: f64,
    pub label_smoothing: f64,
    /// Both encoders place their positions on `[0, position_span]`.
    pub position_span: f64,
    /// Seeds parameter initialisation.
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: layers {2, 1, 2, 2}, 4 heads, width 64.
    pub fn desk(feature_dim: usize, vocab_size: usize) -> Self {
        Self::with_width(feature_dim, vocab_size, 64, 4, [2, 1, 2])
    }

    /// Base-size layout: layers {12, 1, 2, 6}, 4 heads, width 256.
    pub fn base(feature_dim: usize, vocab_size: usize) -> Self {
        Self::with_width(feature_dim, vocab_size, 256, 4, [12, 1, 6])
    }

    /// Large-size layout: layers {12, 1, 2, 6}, 6 heads, width 384.
    pub fn large(feature_dim: usize, vocab_size: usize) -> Self {
        Self::with_width(feature_dim, vocab_size, 384, 6, [12, 1, 6])
    }

    fn with_width(feature_dim: usize, vocab_size: usize, dim: usize, heads: usize, layers: [usize; 3]) -> Self {
        Self {
            feature_dim,
            vocab_size,
            dim,
            heads,
            ffn_dim: 4 * dim,
            encoder_layers: layers[0],
            text_encoder_layers: layers[1],
            decoder_layers: layers[2],
            predictor: PredictorConfig::new(dim),
            lambda: 1.0,
            sigma_init: 0.5,
            label_smoothing: 0.0,
            position_span: POSITION_SPAN,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("vocab_size", self.vocab_size),
            ("dim", self.dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("encoder_layers", self.encoder_layers),
            ("text_encoder_layers", self.text_encoder_layers),
            ("decoder_layers", self.decoder_layers),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.sigma_init > 0.0 && self.sigma_init.is_finite()) {
            return bad(format!("sigma_init must be positive, got {}", self.sigma_init));
        }
        if !(self.position_span > 0.0 && self.position_span.is_finite()) {
            return bad(format!("position span must be positive, got {}", self.position_span));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label smoothing must lie in [0, 1), got {}", self.label_smoothing));
        }
        self.predictor.validate()
    }

    /// `key=value` pairs, in a stable order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let p = &self.predictor;
        [
            ("feature_dim", self.feature_dim.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("text_encoder_layers", self.text_encoder_layers.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("predictor_kernel", p.kernel_size.to_string()),
            ("predictor_channels", p.hidden_channels.to_string()),
            ("predictor_layers", p.layers.to_string()),
            ("lambda", format!("{:?}", self.lambda)),
            ("sigma_init", format!("{:?}", self.sigma_init)),
            ("label_smoothing", format!("{:?}", self.label_smoothing)),
            ("position_span", format!("{:?}", self.position_span)),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Config(format!("missing model key {key:?}")))
        };
        fn num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key:?}")))
        }
        let u = |key: &str| -> Result<usize> { num(key, get(key)?) };
        let f = |key: &str| -> Result<f64> { num(key, get(key)?) };
        let cfg = Self {
            feature_dim: u("feature_dim")?,
            vocab_size: u("vocab_size")?,
            dim: u("dim")?,
            heads: u("heads")?,
            ffn_dim: u("ffn_dim")?,
            encoder_layers: u("encoder_layers")?,
            text_encoder_layers: u("text_encoder_layers")?,
            decoder_layers: u("decoder_layers")?,
            predictor: PredictorConfig {
                kernel_size: u("predictor_kernel")?,
                hidden_channels: u("predictor_channels")?,
                layers: u("predictor_layers")?,
            },
            lambda: f("lambda")?,
            sigma_init: f("sigma_init")?,
            label_smoothing: f("label_smoothing")?,
            position_span: f("position_span")?,
            seed: num("seed", get("seed")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Losses and diagnostics of one training example.
#[derive(Clone, Debug)]
pub struct TrainStepOutput<T> {
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_mse: f64,
    pub alignment: AlignmentBundle<T>,
    pub reconstruction: ReconstructionBundle<T>,
    pub delta_star: Tensor<T>,
}

/// A decoded utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub length: usize,
    pub token_logprobs: Vec<f64>,
    /// Set when the alignment could not be rescaled and the length-1
    /// fallback was emitted instead.
    pub degenerate: bool,
}

/// Knobs for analysis runs of [`Model::infer_with`].
#[derive(Clone, Debug, Default)]
pub struct InferOptions {
    /// Rescales the predicted alignment so the length rule yields exactly
    /// this many tokens.
    pub force_length: Option<usize>,
    /// Replaces the predicted alignment outright.
    pub override_delta: Option<Vec<f64>>,
}

/// Alignment and reconstruction used by one inference pass.
#[derive(Clone, Debug)]
pub struct InferTrace<T> {
    pub hypothesis: Hypothesis,
    pub delta: Tensor<T>,
    pub alpha_hat: Tensor<T>,
    /// Generator attention, oracle mode only.
    pub generator_alpha: Option<Tensor<T>>,
}

pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    decoder_calls: AtomicUsize,
}

impl<T: Real> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            decoder_calls: AtomicUsize::new(0),
        }
    }
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        let c = &config;
        use prefix::*;

        init_linear(&mut ps, &mut rng, &format!("{ACOUSTIC}.in"), c.feature_dim, c.dim)?;
        for i in 0..c.encoder_layers {
            init_encoder_block(&mut ps, &mut rng, &format!("{ACOUSTIC}.{i}"), c.dim, c.ffn_dim)?;
        }

        let bound = 3f64.sqrt();
        let emb = (0..c.vocab_size * c.dim)
            .map(|_| T::of(rand::Rng::random_range(&mut rng, -bound..bound)))
            .collect();
        ps.insert(format!("{TEXT}.emb"), Tensor::new(&[c.vocab_size, c.dim], emb)?)?;
        for i in 0..c.text_encoder_layers {
            init_encoder_block(&mut ps, &mut rng, &format!("{TEXT}.{i}"), c.dim, c.ffn_dim)?;
        }

        init_predictor(&mut ps, &mut rng, PREDICTOR, c.dim, &c.predictor)?;

        for i in 0..c.decoder_layers {
            init_encoder_block(&mut ps, &mut rng, &format!("{DECODER}.{i}"), c.dim, c.ffn_dim)?;
        }
        init_layer_norm(&mut ps, &format!("{DECODER}.ln"), c.dim)?;
        init_linear(&mut ps, &mut rng, &format!("{DECODER}.out"), c.dim, c.vocab_size)?;

        ps.insert(SIGMA, Tensor::scalar(T::of(raw_sigma(c.sigma_init))))?;

        Ok(Self {
            config,
            params: ps,
            decoder_calls: AtomicUsize::new(0),
        })
    }

    /// Wraps existing parameters (e.g. from a checkpoint).
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let reference = Model::<T>::new(config.clone())?;
        for p in reference.params.iter() {
            match params.peek(&p.name) {
                Some(q) if q.tensor.shape() == p.tensor.shape() => {}
                Some(q) => {
                    return Err(Error::Incompatible(format!(
                        "parameter {:?} has shape {:?}, expected {:?}",
                        p.name,
                        q.tensor.shape(),
                        p.tensor.shape()
                    )))
                }
                None => return Err(Error::Incompatible(format!("missing parameter {:?}", p.name))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Incompatible("unexpected extra parameters".into()));
        }
        Ok(Self {
            config,
            params,
            decoder_calls: AtomicUsize::new(0),
        })
    }

    /// Number of decoder forward passes since the last reset.
    pub fn decoder_calls(&self) -> usize {
        self.decoder_calls.load(Ordering::Relaxed)
    }

    pub fn reset_decoder_calls(&self) {
        self.decoder_calls.store(0, Ordering::Relaxed);
    }

    pub fn sigma(&self) -> f64 {
        alignment::effective_sigma(
            self.params
                .peek(prefix::SIGMA)
                .expect("sigma exists")
                .tensor
                .item()
                .f64(),
        )
    }

    fn check_features(&self, x: &Tensor<f64>) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.config.feature_dim {
            return Err(Error::Incompatible(format!(
                "features {:?} do not match feature dim {}",
                x.shape(),
                self.config.feature_dim
            )));
        }
        if x.rows() < 2 {
            return Err(Error::Input(format!("need at least two frames, got {}", x.rows())));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty transcription".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index {
                index: bad,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    // ----------------------------------------------------------- submodules

    /// Acoustic embeddings `e_s: [T, d]`.
    pub fn encode_acoustic(&self, b: &Binder<'_, T>, x: Var) -> Result<Var> {
        let tape = b.tape();
        let t = tape.shape(x)[0];
        if t < 2 {
            return Err(Error::Input(format!("need at least two frames, got {t}")));
        }
        let h = linear(b, &format!("{}.in", prefix::ACOUSTIC), x)?;
        let pos = tape.constant(relative_positions(t, self.config.dim, self.config.position_span, POSITION_GAIN));
        let mut h = tape.add(h, pos)?;
        for i in 0..self.config.encoder_layers {
            h = encoder_block(b, &format!("{}.{i}", prefix::ACOUSTIC), h, self.config.heads)?;
        }
        Ok(h)
    }

    /// Text embeddings `e_t: [L, d]`.
    pub fn encode_text(&self, b: &Binder<'_, T>, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let tape = b.tape();
        let emb = b.var(&format!("{}.emb", prefix::TEXT))?;
        let h = tape.gather_rows(emb, tokens)?;
        let pos = tape.constant(relative_positions(tokens.len(), self.config.dim, self.config.position_span, POSITION_GAIN));
        let mut h = tape.add(h, pos)?;
        for i in 0..self.config.text_encoder_layers {
            h = encoder_block(b, &format!("{}.{i}", prefix::TEXT), h, self.config.heads)?;
        }
        Ok(h)
    }

    /// Logits `[L, V]` for all output positions in one pass.
    pub fn decode_semantic(&self, b: &Binder<'_, T>, semantic: Var) -> Result<Var> {
        self.decoder_calls.fetch_add(1, Ordering::Relaxed);
        let tape = b.tape();
        let l = tape.shape(semantic)[0];
        let pos = tape.constant(sinusoidal_positions(l, self.config.dim));
        let mut h = tape.add(semantic, pos)?;
        for i in 0..self.config.decoder_layers {
            h = encoder_block(b, &format!("{}.{i}", prefix::DECODER), h, self.config.heads)?;
        }
        let h = layer_norm(b, &format!("{}.ln", prefix::DECODER), h)?;
        linear(b, &format!("{}.out", prefix::DECODER), h)
    }

    pub fn predict_delta(&self, b: &Binder<'_, T>, e_s: Var) -> Result<Var> {
        predictor::predictor_forward(b, prefix::PREDICTOR, &self.config.predictor, e_s)
    }

    // -------------------------------------------------------------- training

    /// Forward and backward pass of one example without updating anything.
    pub fn loss_and_grads(&self, example: &TranscriptionExample) -> Result<(TrainStepOutput<T>, ParamGrads<T>)> {
        self.check_features(&example.features)?;
        self.check_tokens(&example.tokens)?;
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.params);
        let x = tape.constant(example.features.cast());
        let e_s = self.encode_acoustic(&b, x)?;
        let e_t = self.encode_text(&b, &example.tokens)?;
        let sigma = b.var(prefix::SIGMA)?;
        let gen = alignment::generator_forward(&tape, e_s, e_t, sigma)?;
        let logits = self.decode_semantic(&b, gen.semantic)?;
        let ce = tape.cross_entropy(logits, &example.tokens, self.config.label_smoothing)?;
        let delta_star = self.predict_delta(&b, e_s)?;
        let mse = predictor::alignment_loss(&tape, delta_star, gen.alignment.delta)?;
        let weighted = tape.scale(mse, self.config.lambda);
        let total = tape.add(ce, weighted)?;
        let grads = tape.backward(total)?;
        let out = TrainStepOutput {
            loss_total: tape.value(total).item().f64(),
            loss_ce: tape.value(ce).item().f64(),
            loss_mse: tape.value(mse).item().f64(),
            alignment: gen.alignment.bundle(&tape),
            reconstruction: gen.reconstruction.bundle(&tape),
            delta_star: tape.value(delta_star).clone(),
        };
        Ok((out, b.collect(&grads)))
    }

    /// One optimizer update on a single example.
    pub fn train_step(
        &mut self,
        example: &TranscriptionExample,
        optimizer: &mut Optimizer<T>,
    ) -> Result<TrainStepOutput<T>> {
        let (out, grads) = self.loss_and_grads(example)?;
        if !out.loss_total.is_finite() {
            return Err(Error::NonFiniteLoss { example: 0 });
        }
        optimizer.apply(&mut self.params, &grads)?;
        Ok(out)
    }

    // ------------------------------------------------------------- inference

    /// Single-step decoding from features alone.
    pub fn infer(&self, x: &Tensor<f64>) -> Result<Hypothesis> {
        Ok(self.infer_with(x, &InferOptions::default(), None)?.hypothesis)
    }

    /// [`Model::infer`] with analysis options and optional stage timing.
    pub fn infer_with(
        &self,
        x: &Tensor<f64>,
        opts: &InferOptions,
        mut times: Option<&mut StageTimes>,
    ) -> Result<InferTrace<T>> {
        self.check_features(x)?;
        let start = Instant::now();
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.params);
        let xv = tape.constant(x.cast());
        let e_s = self.encode_acoustic(&b, xv)?;
        let t_enc = Instant::now();

        let delta = match &opts.override_delta {
            Some(d) => {
                if d.len() != x.rows() {
                    return Err(Error::dim("infer", "override alignment length differs from T"));
                }
                tape.constant(Tensor::vector(d.iter().map(|&v| T::of(v.max(0.0))).collect()))
            }
            None => self.predict_delta(&b, e_s)?,
        };
        let delta = match opts.force_length {
            Some(l) => self.rescale_to_length(&tape, delta, l)?,
            None => delta,
        };
        let length = predictor::predict_length(tape.value(delta).data());
        let sigma = b.var(prefix::SIGMA)?;
        let (recon, degenerate) = self.reconstruct_or_fallback(&tape, delta, length, sigma)?;
        let semantic = alignment::semantic_encodings(&tape, recon.alpha_hat, e_s)?;
        let t_pred = Instant::now();

        let logits = self.decode_semantic(&b, semantic)?;
        let hypothesis = greedy(&tape.value(logits), degenerate);
        let t_dec = Instant::now();
        if let Some(times) = times.as_deref_mut() {
            times.encoder += t_enc - start;
            times.predictor += t_pred - t_enc;
            times.decoder += t_dec - t_pred;
            times.total += t_dec - start;
            times.frames += x.rows();
            times.utterances += 1;
        }
        let delta = tape.value(delta).clone();
        let alpha_hat = tape.value(recon.alpha_hat).clone();
        Ok(InferTrace {
            hypothesis,
            delta,
            alpha_hat,
            generator_alpha: None,
        })
    }

    /// Decoding with the generator's alignment computed from the reference
    /// transcription in place of the predictor's.
    pub fn infer_oracle(&self, example: &TranscriptionExample) -> Result<Hypothesis> {
        Ok(self.infer_oracle_trace(example)?.hypothesis)
    }

    pub fn infer_oracle_trace(&self, example: &TranscriptionExample) -> Result<InferTrace<T>> {
        if !example.is_labeled() {
            return Err(Error::Incompatible("oracle decoding needs a transcription".into()));
        }
        self.check_features(&example.features)?;
        self.check_tokens(&example.tokens)?;
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.params);
        let xv = tape.constant(example.features.cast());
        let e_s = self.encode_acoustic(&b, xv)?;
        let e_t = self.encode_text(&b, &example.tokens)?;
        let gen = alignment::generate_alignment(&tape, e_s, e_t)?;
        let sigma = b.var(prefix::SIGMA)?;
        let (recon, degenerate) =
            self.reconstruct_or_fallback(&tape, gen.delta, example.tokens.len(), sigma)?;
        let semantic = alignment::semantic_encodings(&tape, recon.alpha_hat, e_s)?;
        let logits = self.decode_semantic(&b, semantic)?;
        let hypothesis = greedy(&tape.value(logits), degenerate);
        let delta = tape.value(gen.delta).clone();
        let alpha_hat = tape.value(recon.alpha_hat).clone();
        let generator_alpha = Some(tape.value(gen.alpha).clone());
        Ok(InferTrace {
            hypothesis,
            delta,
            alpha_hat,
            generator_alpha,
        })
    }

    fn rescale_to_length(&self, tape: &Tape<T>, delta: Var, length: usize) -> Result<Var> {
        if length == 0 {
            return Err(Error::Input("forced length must be at least 1".into()));
        }
        let values = tape.value(delta).to_f64_vec();
        let total: f64 = values.iter().sum();
        let target = (length - 1) as f64;
        let scaled: Vec<T> = if total > 0.0 {
            values.iter().map(|v| T::of(v * target / total)).collect()
        } else {
            // uniform advance when the predictor is silent
            let t = values.len();
            (0..t)
                .map(|i| T::of(if i == 0 { 0.0 } else { target / (t - 1) as f64 }))
                .collect()
        };
        Ok(tape.constant(Tensor::vector(scaled)))
    }

    /// Reconstruction at `length` tokens, or the length-1 fallback (uniform
    /// attention over all frames) when the positions cannot be rescaled.
    fn reconstruct_or_fallback(
        &self,
        tape: &Tape<T>,
        delta: Var,
        length: usize,
        sigma: Var,
    ) -> Result<(ReconstructionVars, bool)> {
        match alignment::reconstruct_from_delta(tape, delta, length, sigma) {
            Ok(r) => Ok((r, false)),
            Err(Error::DegenerateAlignment { span, .. }) => {
                log::warn!("degenerate alignment (span {span:e}); emitting a single token");
                let positions_raw = alignment::accumulate_positions(tape, delta);
                let t = tape.shape(delta)[0];
                let positions = tape.constant(Tensor::zeros(&[t]));
                Ok((alignment::reconstruct_at(tape, positions_raw, positions, 1, sigma)?, true))
            }
            Err(e) => Err(e),
        }
    }
}

/// Per-position argmax with log-probabilities.
fn greedy<T: Real>(logits: &Tensor<T>, degenerate: bool) -> Hypothesis {
    let v = logits.cols();
    let mut tokens = Vec::with_capacity(logits.rows());
    let mut token_logprobs = Vec::with_capacity(logits.rows());
    for r in 0..logits.rows() {
        let row: Vec<f64> = logits.row(r).iter().map(|x| x.f64()).collect();
        let (best, &max) = row
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |acc, (i, x)| if *x > *acc.1 { (i, x) } else { acc });
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        tokens.push(best.min(v.saturating_sub(1)));
        token_logprobs.push(max - lse);
    }
    Hypothesis {
        length: tokens.len(),
        tokens,
        token_logprobs,
        degenerate,
    }
}
