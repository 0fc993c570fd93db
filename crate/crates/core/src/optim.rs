//! First-order optimizers over a [`ParamSet`].

use indexmap::IndexMap;

use crate::params::{ParamGrads, ParamSet};
use crate::{Error, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
    /// Linear ramp from `lr / warmup_steps` to `lr`.
    pub warmup_steps: u64,
    /// Cosine decay from `lr` to zero over this many updates.
    pub decay_steps: Option<u64>,
    /// Decoupled weight decay per unit learning rate.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            warmup_steps: 0,
            decay_steps: None,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.decay_steps == Some(0) {
            return Err(Error::Config("decay steps must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Learning rate of update number `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let mut lr = self.lr;
        if self.warmup_steps > 0 && step < self.warmup_steps {
            lr *= (step + 1) as f64 / self.warmup_steps as f64;
        }
        if let Some(d) = self.decay_steps {
            let frac = (step.min(d) as f64) / d as f64;
            lr *= 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        }
        lr
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    step: u64,
    m: IndexMap<String, Tensor<T>>,
    v: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// Updates taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, params: &mut ParamSet<T>, grads: &ParamGrads<T>) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Input("non-finite gradient".into()));
        }
        let mut scale = 1.0;
        if let Some(clip) = self.config.clip_norm {
            let norm = grads.global_norm();
            if norm > clip {
                scale = clip / norm;
            }
        }
        let cfg = &self.config;
        let lr = cfg.lr_at(self.step);
        self.step += 1;
        let decay = T::of(1.0 - lr * cfg.weight_decay);
        let bc1 = 1.0 - cfg.beta1.powf(self.step as f64);
        let bc2 = 1.0 - cfg.beta2.powf(self.step as f64);
        let (b1, b2, eps) = (T::of(cfg.beta1), T::of(cfg.beta2), T::of(cfg.eps));
        for (name, g) in &grads.grads {
            let Some(p) = params.get_mut(name) else {
                return Err(Error::Config(format!("gradient for unknown parameter {name:?}")));
            };
            if !p.trainable {
                continue;
            }
            let sc = T::of(scale);
            if cfg.weight_decay > 0.0 && p.tensor.rank() > 1 {
                for w in p.tensor.data_mut() {
                    *w = *w * decay;
                }
            }
            match cfg.kind {
                OptimizerKind::Sgd => {
                    let step = T::of(lr) * sc;
                    for (w, &gi) in p.tensor.data_mut().iter_mut().zip(g.data()) {
                        *w = *w - step * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self
                        .m
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self
                        .v
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let step_size = T::of(lr / bc1);
                    let inv_bc2 = T::of(1.0 / bc2);
                    for (((w, &gi), mi), vi) in p
                        .tensor
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        let gi = gi * sc;
                        *mi = b1 * *mi + (T::one() - b1) * gi;
                        *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                        *w = *w - step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Moment tensors as `(name, first, second)`, in insertion order.
    pub fn state(&self) -> impl Iterator<Item = (&str, &Tensor<T>, &Tensor<T>)> {
        self.m
            .iter()
            .map(|(k, m)| (k.as_str(), m, self.v.get(k).expect("moments are paired")))
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn restore(
        config: OptimizerConfig,
        step: u64,
        moments: Vec<(String, Tensor<T>, Tensor<T>)>,
    ) -> Self {
        let mut opt = Self::new(config);
        opt.step = step;
        for (name, m, v) in moments {
            opt.m.insert(name.clone(), m);
            opt.v.insert(name, v);
        }
        opt
    }
}
