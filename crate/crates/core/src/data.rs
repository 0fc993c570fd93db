//! Synthetic monotonic transduction corpora and their on-disk formats.
//!
//! Each token owns a fixed random feature prototype. An utterance samples
//! `L` tokens, then lets token `j` emit `r_j` frames, each a copy of its
//! prototype plus Gaussian noise. The frame-to-token map is recorded as
//! the ground-truth alignment (diagnostics only).
//!
//! Corpus file layout (text, one record per line after the header):
//!
//! ```text
//! IMVALIGN-CORPUS v1
//! <token ids> | <T> <F> | <T*F features, row-major> | <alignment or empty>
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::par::{map_indexed, Parallelism};
use crate::{Error, Result, Tensor};

pub const CORPUS_MAGIC: &str = "IMVALIGN-CORPUS";
pub const CORPUS_VERSION: &str = "v1";

/// One utterance: features `x: [T, F]`, tokens `y` and optionally the
/// frame-to-token map it was generated from.
#[derive(Clone, Debug, PartialEq)]
pub struct TranscriptionExample {
    pub features: Tensor<f64>,
    /// Empty for unlabeled utterances.
    pub tokens: Vec<usize>,
    pub true_alignment: Option<Vec<usize>>,
}

impl TranscriptionExample {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn is_labeled(&self) -> bool {
        !self.tokens.is_empty()
    }

    /// Checks the training-time invariants: `T >= 2`, `L >= 1`, and a
    /// monotone surjective alignment when one is present.
    pub fn validate(&self) -> Result<()> {
        if self.features.rank() != 2 || self.frames() < 2 {
            return Err(Error::Input(format!(
                "need at least two frames, got features {:?}",
                self.features.shape()
            )));
        }
        if self.tokens.is_empty() {
            return Err(Error::Input("example has no transcription".into()));
        }
        if let Some(a) = &self.true_alignment {
            if !is_monotone_surjection(a, self.tokens.len()) || a.len() != self.frames() {
                return Err(Error::Input("alignment is not a monotone map onto the tokens".into()));
            }
        }
        Ok(())
    }
}

/// Non-decreasing, starts at 0, ends at `tokens - 1`, and never skips a token.
pub fn is_monotone_surjection(map: &[usize], tokens: usize) -> bool {
    !map.is_empty()
        && map[0] == 0
        && *map.last().unwrap() + 1 == tokens
        && map.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrototypeKind {
    /// Standard normal entries.
    Gaussian,
    /// Token `k` maps to the k-th unit vector; needs `feature_dim >= vocab_size`.
    OneHot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthTaskConfig {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub noise_std: f64,
    pub prototypes: PrototypeKind,
    /// Redraw a token equal to its predecessor. Without this, noiseless
    /// features give no boundary between two equal adjacent tokens.
    pub distinct_adjacent: bool,
    /// Seeds the prototypes and every example.
    pub seed: u64,
}

impl Default for SynthTaskConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            feature_dim: 16,
            tokens_min: 3,
            tokens_max: 8,
            frames_min: 2,
            frames_max: 5,
            noise_std: 0.0,
            prototypes: PrototypeKind::Gaussian,
            distinct_adjacent: false,
            seed: 0,
        }
    }
}

impl SynthTaskConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.feature_dim == 0 {
            return bad("vocab size and feature dim must be positive".into());
        }
        if self.tokens_min < 1 || self.tokens_min > self.tokens_max {
            return bad(format!("bad token range [{}, {}]", self.tokens_min, self.tokens_max));
        }
        if self.distinct_adjacent && self.vocab_size < 2 && self.tokens_max > 1 {
            return bad("distinct adjacent tokens need a vocabulary of at least 2".into());
        }
        if self.frames_min < 1 || self.frames_min > self.frames_max {
            return bad(format!("bad frames-per-token range [{}, {}]", self.frames_min, self.frames_max));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise std must be non-negative, got {}", self.noise_std));
        }
        if self.prototypes == PrototypeKind::OneHot && self.feature_dim < self.vocab_size {
            return bad("one-hot prototypes need feature_dim >= vocab_size".into());
        }
        if self.tokens_max * self.frames_max < 2 {
            return bad("utterances need at least two frames".into());
        }
        Ok(())
    }
}

/// The fixed prototype feature vector of every token, `[V, F]`.
pub fn prototypes(cfg: &SynthTaskConfig) -> Tensor<f64> {
    let (v, f) = (cfg.vocab_size, cfg.feature_dim);
    let data = match cfg.prototypes {
        PrototypeKind::OneHot => (0..v * f)
            .map(|i| if i % f == i / f { 1.0 } else { 0.0 })
            .collect(),
        PrototypeKind::Gaussian => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a5c);
            let normal = Normal::new(0.0, 1.0).expect("valid normal");
            (0..v * f).map(|_| normal.sample(&mut rng)).collect()
        }
    };
    Tensor::new(&[v, f], data).expect("shape matches")
}

/// Samples one utterance.
pub fn gen_example(
    cfg: &SynthTaskConfig,
    protos: &Tensor<f64>,
    rng: &mut impl Rng,
) -> TranscriptionExample {
    let f = cfg.feature_dim;
    loop {
        let l = rng.random_range(cfg.tokens_min..=cfg.tokens_max);
        let mut tokens: Vec<usize> = Vec::with_capacity(l);
        for _ in 0..l {
            let tok = match tokens.last() {
                Some(&prev) if cfg.distinct_adjacent => {
                    // uniform over the other V - 1 ids
                    let t = rng.random_range(0..cfg.vocab_size - 1);
                    t + usize::from(t >= prev)
                }
                _ => rng.random_range(0..cfg.vocab_size),
            };
            tokens.push(tok);
        }
        let mut alignment = Vec::new();
        for j in 0..l {
            let r = rng.random_range(cfg.frames_min..=cfg.frames_max);
            alignment.extend(std::iter::repeat_n(j, r));
        }
        let mut data = Vec::with_capacity(alignment.len() * f);
        let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("valid normal");
        for &j in &alignment {
            for &p in protos.row(tokens[j]) {
                let n = if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                data.push(p + n);
            }
        }
        if alignment.len() < 2 {
            // resample single-frame draws
            continue;
        }
        let t = alignment.len();
        return TranscriptionExample {
            features: Tensor::new(&[t, f], data).expect("shape matches"),
            tokens,
            true_alignment: Some(alignment),
        };
    }
}

fn example_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

/// Examples `first..first + count` of the task. Example `i` depends only on
/// `(cfg, i)`, so disjoint ranges give disjoint train / held-out splits with
/// shared prototypes.
pub fn generate(
    cfg: &SynthTaskConfig,
    first: usize,
    count: usize,
    mode: Parallelism,
) -> Result<Vec<TranscriptionExample>> {
    cfg.validate()?;
    let protos = prototypes(cfg);
    let idx: Vec<usize> = (first..first + count).collect();
    Ok(map_indexed(mode, &idx, |_, &i| {
        gen_example(cfg, &protos, &mut example_rng(cfg.seed, i as u64))
    }))
}

// ----------------------------------------------------------------- corpus IO

pub fn format_record(ex: &TranscriptionExample) -> String {
    let mut s = String::new();
    let join = |s: &mut String, xs: &mut dyn Iterator<Item = String>| {
        let mut first = true;
        for x in xs {
            if !first {
                s.push(' ');
            }
            s.push_str(&x);
            first = false;
        }
    };
    join(&mut s, &mut ex.tokens.iter().map(|t| t.to_string()));
    let (t, f) = (ex.features.rows(), ex.features.cols());
    let _ = write!(s, " | {t} {f} | ");
    join(&mut s, &mut ex.features.data().iter().map(|x| format!("{x:?}")));
    s.push_str(" |");
    if let Some(a) = &ex.true_alignment {
        s.push(' ');
        join(&mut s, &mut a.iter().map(|x| x.to_string()));
    }
    s
}

pub fn write_corpus_to(mut w: impl Write, examples: &[TranscriptionExample]) -> Result<()> {
    writeln!(w, "{CORPUS_MAGIC} {CORPUS_VERSION}")?;
    for ex in examples {
        writeln!(w, "{}", format_record(ex))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_corpus(path: impl AsRef<Path>, examples: &[TranscriptionExample]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_corpus_to(std::io::BufWriter::new(file), examples)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<TranscriptionExample>> {
    read_corpus_from(std::fs::File::open(path)?)
}

pub fn read_corpus_from(r: impl Read) -> Result<Vec<TranscriptionExample>> {
    let mut text = String::new();
    BufReader::new(r).read_to_string(&mut text)?;
    let complete = text.ends_with('\n');
    let mut lines = text.lines().enumerate().peekable();
    let Some((_, header)) = lines.next() else {
        return Err(Error::CorruptHeader("empty file".into()));
    };
    let mut parts = header.split_whitespace();
    if parts.next() != Some(CORPUS_MAGIC) {
        return Err(Error::CorruptHeader(format!("expected {CORPUS_MAGIC:?}, found {header:?}")));
    }
    match parts.next() {
        Some(CORPUS_VERSION) => {}
        found => {
            return Err(Error::VersionMismatch {
                found: found.unwrap_or("").to_string(),
                expected: CORPUS_VERSION.to_string(),
            })
        }
    }
    let mut out = Vec::new();
    while let Some((n, line)) = lines.next() {
        let last = lines.peek().is_none();
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(line, n + 1) {
            Ok(_) if last && !complete => {
                return Err(Error::Truncated(format!("line {} has no terminator", n + 1)));
            }
            Ok(ex) => out.push(ex),
            Err(_) if last && !complete => {
                return Err(Error::Truncated(format!("line {} ends early", n + 1)));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn parse_record(line: &str, lineno: usize) -> Result<TranscriptionExample> {
    let bad = |detail: &str| Error::Malformed {
        line: lineno,
        detail: detail.to_string(),
    };
    let fields: Vec<&str> = line.split('|').collect();
    if fields.len() != 4 {
        return Err(bad("expected four '|'-separated fields"));
    }
    let ints = |s: &str| -> Result<Vec<usize>> {
        s.split_whitespace()
            .map(|x| x.parse::<usize>().map_err(|_| bad(&format!("bad integer {x:?}"))))
            .collect()
    };
    let tokens = ints(fields[0])?;
    let dims = ints(fields[1])?;
    let [t, f] = dims[..] else {
        return Err(bad("expected 'T F'"));
    };
    let features: Vec<f64> = fields[2]
        .split_whitespace()
        .map(|x| x.parse::<f64>().map_err(|_| bad(&format!("bad float {x:?}"))))
        .collect::<Result<_>>()?;
    if features.len() != t * f {
        return Err(bad(&format!("expected {} features, found {}", t * f, features.len())));
    }
    let alignment = ints(fields[3])?;
    let true_alignment = if alignment.is_empty() {
        None
    } else {
        if alignment.len() != t {
            return Err(bad("alignment length differs from frame count"));
        }
        Some(alignment)
    };
    Ok(TranscriptionExample {
        features: Tensor::new(&[t, f], features)?,
        tokens,
        true_alignment,
    })
}

// --------------------------------------------------------------------- vocab

/// Token strings with `id == line index`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::DuplicateToken(t.clone()));
            }
        }
        Ok(Self { tokens, index })
    }

    /// `tok0, tok1, ...` for synthetic tasks.
    pub fn synthetic(size: usize) -> Self {
        Self::from_tokens((0..size).map(|i| format!("tok{i}")).collect()).expect("names are unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[&str]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| self.id(t).ok_or_else(|| Error::UnknownToken(t.to_string())))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One token string per line; the id is the line index.
pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocab> {
    let file = std::fs::File::open(path)?;
    let tokens = BufReader::new(file).lines().collect::<std::io::Result<Vec<_>>>()?;
    Vocab::from_tokens(tokens)
}
