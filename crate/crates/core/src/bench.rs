//! Per-stage inference timing and scaling fits.
//!
//! Stages: acoustic encoder; predictor (alignment prediction, length rule,
//! reconstruction and the semantic product); decoder. Timing always runs
//! on the calling thread.

use std::fmt::Write as _;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::TranscriptionExample;
use crate::model::{InferOptions, Model};
use crate::{Error, Real, Result, Tensor};

/// Seconds of audio per frame (10 ms hop).
pub const DEFAULT_FRAME_SHIFT: f64 = 0.01;

/// Accumulated wall-clock time per inference stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub encoder: Duration,
    pub predictor: Duration,
    pub decoder: Duration,
    pub total: Duration,
    pub frames: usize,
    pub utterances: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingReport {
    pub encoder_s: f64,
    pub predictor_s: f64,
    pub decoder_s: f64,
    pub total_s: f64,
    pub utterances: usize,
    pub audio_s: f64,
    /// Processing seconds per second of audio.
    pub rtf_proxy: f64,
    pub repeats: usize,
}

impl TimingReport {
    fn from_times(t: &StageTimes, frame_shift: f64, repeats: usize) -> Self {
        let audio_s = t.frames as f64 * frame_shift;
        let total_s = t.total.as_secs_f64();
        Self {
            encoder_s: t.encoder.as_secs_f64(),
            predictor_s: t.predictor.as_secs_f64(),
            decoder_s: t.decoder.as_secs_f64(),
            total_s,
            utterances: t.utterances,
            audio_s,
            rtf_proxy: if audio_s > 0.0 { total_s / audio_s } else { 0.0 },
            repeats,
        }
    }

    /// `key<TAB>value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "encoder_s\t{:.6}", self.encoder_s);
        let _ = writeln!(s, "predictor_s\t{:.6}", self.predictor_s);
        let _ = writeln!(s, "decoder_s\t{:.6}", self.decoder_s);
        let _ = writeln!(s, "total_s\t{:.6}", self.total_s);
        let _ = writeln!(s, "utterances\t{}", self.utterances);
        let _ = writeln!(s, "audio_s\t{:.3}", self.audio_s);
        let _ = writeln!(s, "rtf_proxy\t{:.6}", self.rtf_proxy);
        let _ = writeln!(s, "repeats\t{}", self.repeats);
        s
    }
}

/// Times baseline inference over `corpus`.
///
/// One untimed warm-up pass precedes `repeats` timed passes; the report is
/// the pass with the median end-to-end time, so its stage totals are
/// consistent with its end-to-end total.
pub fn benchmark_inference<T: Real>(
    model: &Model<T>,
    corpus: &[TranscriptionExample],
    repeats: usize,
    frame_shift: f64,
) -> Result<TimingReport> {
    if repeats < 3 {
        return Err(Error::Config(format!("benchmark needs at least 3 repeats, got {repeats}")));
    }
    let opts = InferOptions::default();
    for ex in corpus {
        model.infer_with(&ex.features, &opts, None)?;
    }
    let mut runs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let mut times = StageTimes::default();
        for ex in corpus {
            model.infer_with(&ex.features, &opts, Some(&mut times))?;
        }
        runs.push(times);
    }
    runs.sort_by_key(|t| t.total);
    Ok(TimingReport::from_times(&runs[repeats / 2], frame_shift, repeats))
}

/// Fastest of `repeats` predictor-stage timings for one utterance of
/// `frames` random frames decoded at exactly `length` tokens.
pub fn predictor_stage_seconds<T: Real>(
    model: &Model<T>,
    frames: usize,
    length: usize,
    repeats: usize,
    seed: u64,
) -> Result<f64> {
    if repeats == 0 {
        return Err(Error::Config("need at least one repeat".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let f = model.config.feature_dim;
    let x = Tensor::new(&[frames, f], (0..frames * f).map(|_| normal.sample(&mut rng)).collect())?;
    let opts = InferOptions {
        force_length: Some(length),
        ..Default::default()
    };
    model.infer_with(&x, &opts, None)?;
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let mut times = StageTimes::default();
        model.infer_with(&x, &opts, Some(&mut times))?;
        samples.push(times.predictor.as_secs_f64());
    }
    Ok(samples.into_iter().fold(f64::INFINITY, f64::min))
}

/// Least-squares line and Pearson correlation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub correlation: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let n = xs.len().min(ys.len()) as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    LinearFit {
        slope,
        intercept: my - slope * mx,
        correlation: if sxx > 0.0 && syy > 0.0 { sxy / (sxx * syy).sqrt() } else { 0.0 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_a_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.5 * x - 1.0).collect();
        let f = linear_fit(&xs, &ys);
        assert!((f.slope - 2.5).abs() < 1e-12);
        assert!((f.intercept + 1.0).abs() < 1e-12);
        assert!((f.correlation - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_rtf_uses_frame_shift() {
        let t = StageTimes {
            total: Duration::from_millis(50),
            frames: 1000,
            utterances: 2,
            ..Default::default()
        };
        let r = TimingReport::from_times(&t, DEFAULT_FRAME_SHIFT, 3);
        assert!((r.audio_s - 10.0).abs() < 1e-12);
        assert!((r.rtf_proxy - 0.005).abs() < 1e-12);
        assert!(r.to_kv().contains("rtf_proxy\t0.005000"));
    }
}
