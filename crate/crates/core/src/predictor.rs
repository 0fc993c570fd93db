//! Alignment predictor: estimates the per-frame alignment from acoustic
//! embeddings alone, so inference needs no transcription.
//!
//! Two blocks of `conv1d (same padding) -> layer norm -> relu`, then a
//! one-channel linear head followed by relu so the output is never negative.

use rand::Rng;

use crate::layers::{init_layer_norm, layer_norm};
use crate::params::{Binder, ParamSet};
use crate::tape::{Tape, Var};
use crate::{Error, Real, Result, Tensor};

/// Number of convolution blocks. Fixed.
pub const PREDICTOR_LAYERS: usize = 2;

/// Initial head bias; keeps the output relu active at the start of training.
const HEAD_BIAS_INIT: f64 = 0.1;

/// Backward slope of the output relu below zero. The forward value is
/// unchanged, so a head pushed negative everywhere can still recover.
pub const HEAD_GRAD_LEAK: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorConfig {
    pub kernel_size: usize,
    pub hidden_channels: usize,
    pub layers: usize,
}

impl PredictorConfig {
    pub fn new(hidden_channels: usize) -> Self {
        Self {
            kernel_size: 3,
            hidden_channels,
            layers: PREDICTOR_LAYERS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers != PREDICTOR_LAYERS {
            return Err(Error::Config(format!(
                "predictor has exactly {PREDICTOR_LAYERS} layers, got {}",
                self.layers
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "predictor kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.hidden_channels == 0 {
            return Err(Error::Config("predictor needs at least one channel".into()));
        }
        Ok(())
    }
}

/// Predictor output for one utterance.
#[derive(Clone, Debug)]
pub struct PredictedAlignment<T> {
    pub delta_star: Tensor<T>,
    pub predicted_length: usize,
}

pub fn init_predictor<T: Real>(
    ps: &mut ParamSet<T>,
    rng: &mut impl Rng,
    prefix: &str,
    in_dim: usize,
    cfg: &PredictorConfig,
) -> Result<()> {
    cfg.validate()?;
    let (k, h) = (cfg.kernel_size, cfg.hidden_channels);
    let mut cin = in_dim;
    for layer in 0..cfg.layers {
        let bound = (6.0 / (k * cin + h) as f64).sqrt();
        let w = (0..k * cin * h)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        ps.insert(format!("{prefix}.conv{layer}.w"), Tensor::new(&[k, cin, h], w)?)?;
        ps.insert(format!("{prefix}.conv{layer}.b"), Tensor::zeros(&[h]))?;
        init_layer_norm(ps, &format!("{prefix}.ln{layer}"), h)?;
        cin = h;
    }
    let bound = (6.0 / (h + 1) as f64).sqrt();
    let w = (0..h).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    ps.insert(format!("{prefix}.head.w"), Tensor::new(&[h, 1], w)?)?;
    ps.insert(format!("{prefix}.head.b"), Tensor::full(&[1], T::of(HEAD_BIAS_INIT)))
}

/// `delta_star: [T]` from `e_s: [T, d]`.
pub fn predictor_forward<T: Real>(
    b: &Binder<'_, T>,
    prefix: &str,
    cfg: &PredictorConfig,
    e_s: Var,
) -> Result<Var> {
    let tape = b.tape();
    let t = tape.shape(e_s)[0];
    if t == 0 {
        return Err(Error::Input("predictor needs at least one frame".into()));
    }
    let mut h = e_s;
    for layer in 0..cfg.layers {
        let w = b.var(&format!("{prefix}.conv{layer}.w"))?;
        let bias = b.var(&format!("{prefix}.conv{layer}.b"))?;
        h = tape.conv1d_same(h, w, bias)?;
        h = layer_norm(b, &format!("{prefix}.ln{layer}"), h)?;
        h = tape.relu(h);
    }
    let w = b.var(&format!("{prefix}.head.w"))?;
    let bias = b.var(&format!("{prefix}.head.b"))?;
    let out = tape.add_bias(tape.matmul(h, w)?, bias)?;
    let leak = tape.sub(out, tape.detach(out))?;
    let out = tape.add(tape.relu(out), tape.scale(leak, HEAD_GRAD_LEAK))?;
    tape.reshape(out, &[t])
}

/// `round(sum(delta_star)) + 1`, never below 1.
///
/// Rescaled positions run over `0..=L-1`, so the accumulated alignment
/// estimates `L - 1` rather than `L`.
pub fn predict_length<T: Real>(delta_star: &[T]) -> usize {
    let total: f64 = delta_star.iter().map(|x| x.f64()).sum();
    if !total.is_finite() || total <= 0.0 {
        return 1;
    }
    total.round() as usize + 1
}

/// Mean squared error between the predicted alignment and the generator's
/// alignment. The target is detached, so this loss only trains the
/// predictor (and whatever feeds it).
pub fn alignment_loss<T: Real>(tape: &Tape<T>, delta_star: Var, delta: Var) -> Result<Var> {
    let (a, b) = (tape.shape(delta_star), tape.shape(delta));
    if a != b {
        return Err(Error::dim("alignment_loss", format!("{a:?} vs {b:?}")));
    }
    let target = tape.detach(delta);
    tape.mse(delta_star, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, d: usize) -> (ParamSet<f64>, PredictorConfig) {
        let cfg = PredictorConfig::new(6);
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_predictor(&mut ps, &mut rng, "pred", d, &cfg).unwrap();
        (ps, cfg)
    }

    #[test]
    fn zero_weights_give_the_head_bias() {
        let (mut ps, cfg) = setup(1, 4);
        for p in ps.iter_mut() {
            if p.name.ends_with(".w") {
                p.tensor = Tensor::zeros(p.tensor.shape());
            }
        }
        ps.get_mut("pred.head.b").unwrap().tensor = Tensor::scalar(0.25);
        let tape = Tape::new();
        let b = Binder::new(&tape, &ps);
        let x = tape.constant(Tensor::full(&[5, 4], 0.3));
        let d = predictor_forward(&b, "pred", &cfg, x).unwrap();
        assert_eq!(tape.value(d).data(), &[0.25; 5]);

        ps.get_mut("pred.head.b").unwrap().tensor = Tensor::scalar(-0.25);
        let tape = Tape::new();
        let b = Binder::new(&tape, &ps);
        let x = tape.constant(Tensor::full(&[5, 4], 0.3));
        let d = predictor_forward(&b, "pred", &cfg, x).unwrap();
        assert_eq!(tape.value(d).data(), &[0.0; 5]);
    }

    #[test]
    fn output_is_non_negative() {
        let (ps, cfg) = setup(7, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for t in [1, 2, 9] {
            let x: Vec<f64> = (0..t * 3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let tape = Tape::new();
            let b = Binder::new(&tape, &ps);
            let xv = tape.constant(Tensor::new(&[t, 3], x).unwrap());
            let d = predictor_forward(&b, "pred", &cfg, xv).unwrap();
            assert_eq!(tape.shape(d), vec![t]);
            assert!(tape.value(d).data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn length_rule() {
        assert_eq!(predict_length(&[0.0, 0.4, 0.6]), 2);
        assert_eq!(predict_length(&[0.0f64; 4]), 1);
        assert_eq!(predict_length(&[0.0, 1.0, 1.0]), 3);
        assert_eq!(predict_length::<f64>(&[]), 1);
    }

    #[test]
    fn alignment_loss_values_and_stop_gradient() {
        let tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let target = tape.leaf(Tensor::vector(vec![0.0, 2.0]));
        let l = alignment_loss(&tape, pred, target).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(pred).unwrap().data(), &[0.0, -2.0]);
        assert!(g.get(target).is_none());

        let same = alignment_loss(&tape, target, target).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);

        let short = tape.leaf(Tensor::vector(vec![1.0]));
        assert!(alignment_loss(&tape, short, target).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = PredictorConfig::new(4);
        assert!(cfg.validate().is_ok());
        cfg.kernel_size = 4;
        assert!(cfg.validate().is_err());
        cfg.kernel_size = 3;
        cfg.layers = 3;
        assert!(cfg.validate().is_err());
    }
}
