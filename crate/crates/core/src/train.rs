//! Training loop with optional gradient accumulation.
//!
//! Each step draws a mini-batch from the corpus using an RNG keyed on
//! `(seed, step)`, so a run resumed from a checkpoint sees exactly the
//! batches the uninterrupted run would have seen. A batch size that covers
//! the corpus gives full-batch steps over the examples in order.
//! Per-example gradients are computed independently (in parallel when
//! enabled) and summed in batch order before a single optimizer update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::TranscriptionExample;
use crate::model::Model;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::par::{map_indexed, Parallelism};
use crate::params::ParamGrads;
use crate::{Error, Real, Result};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            parallelism: Parallelism::default(),
        }
    }
}

impl TrainConfig {
    /// Recipe for the synthetic tasks: batches of 16, Adam at 2e-3 with a
    /// 100-step warmup, cosine decay over `steps`, weight decay 0.1 and
    /// clipping at norm 1.
    pub fn recipe(steps: u64) -> Self {
        Self {
            batch_size: 16,
            optimizer: OptimizerConfig {
                lr: 2e-3,
                clip_norm: Some(1.0),
                warmup_steps: 100.min(steps),
                decay_steps: Some(steps.max(1)),
                weight_decay: 0.1,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        self.optimizer.validate()
    }
}

/// Batch-mean losses of one update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_mse: f64,
    /// Examples dropped because their alignment was degenerate.
    pub skipped: usize,
    pub sigma: f64,
}

pub struct Trainer<T: Real> {
    pub model: Model<T>,
    pub optimizer: Optimizer<T>,
    pub config: TrainConfig,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(config.optimizer.clone());
        Ok(Self {
            model,
            optimizer,
            config,
        })
    }

    /// Continues from a restored optimizer state.
    pub fn resume(model: Model<T>, optimizer: Optimizer<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            optimizer,
            config,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.optimizer.steps()
    }

    /// The whole corpus in order when the batch covers it.
    fn batch_indices(&self, step: u64, n: usize) -> Vec<usize> {
        if self.config.batch_size >= n {
            return (0..n).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step);
        (0..self.config.batch_size)
            .map(|_| rng.random_range(0..n))
            .collect()
    }

    /// One optimizer update on a freshly drawn batch.
    pub fn step(&mut self, corpus: &[TranscriptionExample]) -> Result<StepLog> {
        if corpus.is_empty() {
            return Err(Error::Input("cannot train on an empty corpus".into()));
        }
        let step = self.optimizer.steps();
        let batch = self.batch_indices(step, corpus.len());
        let model = &self.model;
        let results = map_indexed(self.config.parallelism, &batch, |_, &i| {
            if !corpus[i].features.data().iter().all(|&v| T::of(v).is_finite()) {
                return Err(Error::NonFiniteLoss { example: i });
            }
            model.loss_and_grads(&corpus[i]).map_err(|e| e.with_example(i))
        });

        let mut grads = ParamGrads::default();
        let (mut total, mut ce, mut mse) = (0.0, 0.0, 0.0);
        let mut used = 0usize;
        let mut skipped = 0usize;
        for (r, &i) in results.into_iter().zip(&batch) {
            match r {
                Ok((out, g)) => {
                    if !out.loss_total.is_finite() || !g.is_finite() {
                        return Err(Error::NonFiniteLoss { example: i });
                    }
                    total += out.loss_total;
                    ce += out.loss_ce;
                    mse += out.loss_mse;
                    grads.accumulate(&g);
                    used += 1;
                }
                Err(Error::DegenerateAlignment { span, example }) => {
                    log::warn!(
                        "skipping example {} at step {step}: degenerate alignment (span {span:e})",
                        example.unwrap_or(i)
                    );
                    skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        if used == 0 {
            return Err(Error::DegenerateAlignment {
                span: 0.0,
                example: batch.first().copied(),
            });
        }
        let inv = 1.0 / used as f64;
        grads.scale(inv);
        self.optimizer.apply(&mut self.model.params, &grads)?;
        Ok(StepLog {
            step: step + 1,
            loss_total: total * inv,
            loss_ce: ce * inv,
            loss_mse: mse * inv,
            skipped,
            sigma: self.model.sigma(),
        })
    }

    /// Runs `steps` updates, reporting each through `on_step`.
    pub fn run(
        &mut self,
        corpus: &[TranscriptionExample],
        steps: usize,
        mut on_step: impl FnMut(&StepLog),
    ) -> Result<Vec<StepLog>> {
        let mut logs = Vec::with_capacity(steps);
        for _ in 0..steps {
            let log = self.step(corpus)?;
            on_step(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}
