//! Token error rates, class-mapped error rates and corpus evaluation in
//! predictor ("baseline") or generator ("oracle") alignment mode.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::data::{TranscriptionExample, Vocab};
use crate::model::{Hypothesis, Model};
use crate::par::{map_indexed, Parallelism};
use crate::{Error, Real, Result};

/// Edit-operation counts against a reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScoreReport {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_tokens: usize,
}

impl ScoreReport {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `(S + D + I) / N`; undefined for an empty reference.
    pub fn error_rate(&self) -> Result<f64> {
        if self.ref_tokens == 0 {
            return Err(Error::EmptyReference);
        }
        Ok(self.errors() as f64 / self.ref_tokens as f64)
    }

    /// Micro-averaging: counts add up.
    pub fn merge(&mut self, other: &ScoreReport) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.ref_tokens += other.ref_tokens;
    }
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`.
///
/// Among minimal alignments the backtrace prefers a substitution, then an
/// insertion, then a deletion.
pub fn edit_distance<S: PartialEq>(reference: &[S], hyp: &[S]) -> ScoreReport {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        cost[i * w] = i;
    }
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let ins = cost[i * w + j - 1] + 1;
            let del = cost[(i - 1) * w + j] + 1;
            cost[i * w + j] = sub.min(ins).min(del);
        }
    }
    let mut report = ScoreReport {
        ref_tokens: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if cost[(i - 1) * w + j - 1] + usize::from(!same) == here {
                if !same {
                    report.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && cost[i * w + j - 1] + 1 == here {
            report.insertions += 1;
            j -= 1;
        } else {
            report.deletions += 1;
            i -= 1;
        }
    }
    report
}

/// Many-to-one map from token ids to class ids (e.g. characters to
/// syllables).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMap {
    classes: Vec<Option<usize>>,
    names: Vec<String>,
}

impl ClassMap {
    /// `classes[id]` is the class of token `id`.
    pub fn from_ids(classes: Vec<usize>) -> Self {
        let n = classes.iter().copied().max().map_or(0, |m| m + 1);
        Self {
            classes: classes.into_iter().map(Some).collect(),
            names: (0..n).map(|c| c.to_string()).collect(),
        }
    }

    pub fn identity(vocab_size: usize) -> Self {
        Self::from_ids((0..vocab_size).collect())
    }

    /// Lines of `token<TAB>class`; class ids follow first appearance.
    pub fn load(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut classes = vec![None; vocab.len()];
        let mut names = Vec::new();
        let mut ids: HashMap<String, usize> = HashMap::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let Some((tok, class)) = line.split_once('\t') else {
                return Err(Error::Malformed {
                    line: n + 1,
                    detail: "expected token<TAB>class".into(),
                });
            };
            let id = vocab
                .id(tok)
                .ok_or_else(|| Error::UnknownToken(tok.to_string()))?;
            let next = ids.len();
            let c = *ids.entry(class.to_string()).or_insert_with(|| {
                names.push(class.to_string());
                next
            });
            classes[id] = Some(c);
        }
        Ok(Self { classes, names })
    }

    pub fn class_of(&self, id: usize) -> Result<usize> {
        self.classes
            .get(id)
            .copied()
            .flatten()
            .ok_or(Error::Unmapped(id))
    }

    pub fn class_name(&self, class: usize) -> Option<&str> {
        self.names.get(class).map(String::as_str)
    }

    pub fn map(&self, ids: &[usize]) -> Result<Vec<usize>> {
        ids.iter().map(|&i| self.class_of(i)).collect()
    }
}

/// Edit distance after mapping both sequences through `map`.
pub fn class_mapped_error(reference: &[usize], hyp: &[usize], map: &ClassMap) -> Result<ScoreReport> {
    Ok(edit_distance(&map.map(reference)?, &map.map(hyp)?))
}

/// Where the reconstruction alignment comes from during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// Predictor alignment (what deployment sees).
    Baseline,
    /// Generator alignment from the reference transcription.
    Oracle,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "oracle" => Ok(Self::Oracle),
            other => Err(Error::Config(format!("unknown mode {other:?} (baseline|oracle)"))),
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::Oracle => "oracle",
        })
    }
}

/// Micro-averaged scores over a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusReport {
    pub mode: DecodeMode,
    pub score: ScoreReport,
    pub class_score: Option<ScoreReport>,
    pub utterances: usize,
    pub length_exact: usize,
    /// Utterances with `|L* - L| <= 1`.
    pub length_within_one: usize,
    pub degenerate: usize,
}

impl CorpusReport {
    pub fn length_accuracy(&self) -> f64 {
        if self.utterances == 0 {
            return 0.0;
        }
        self.length_within_one as f64 / self.utterances as f64
    }

    /// `key<TAB>value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let rate = |r: &ScoreReport| r.error_rate().map_or("nan".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(s, "mode\t{}", self.mode);
        let _ = writeln!(s, "utterances\t{}", self.utterances);
        let _ = writeln!(s, "ref_tokens\t{}", self.score.ref_tokens);
        let _ = writeln!(s, "substitutions\t{}", self.score.substitutions);
        let _ = writeln!(s, "deletions\t{}", self.score.deletions);
        let _ = writeln!(s, "insertions\t{}", self.score.insertions);
        let _ = writeln!(s, "error_rate\t{}", rate(&self.score));
        let _ = writeln!(s, "length_exact\t{}", self.length_exact);
        let _ = writeln!(s, "length_within_one\t{}", self.length_within_one);
        let _ = writeln!(s, "degenerate\t{}", self.degenerate);
        if let Some(c) = &self.class_score {
            let _ = writeln!(s, "class_errors\t{}", c.errors());
            let _ = writeln!(s, "class_error_rate\t{}", rate(c));
        }
        s
    }
}

/// Decodes every utterance and scores it against its transcription.
pub fn evaluate_corpus<T: Real>(
    model: &Model<T>,
    corpus: &[TranscriptionExample],
    mode: DecodeMode,
    class_map: Option<&ClassMap>,
    parallelism: Parallelism,
) -> Result<CorpusReport> {
    let cfg = &model.config;
    for (i, ex) in corpus.iter().enumerate() {
        if ex.features.cols() != cfg.feature_dim {
            return Err(Error::Incompatible(format!(
                "example {i} has {} features, model expects {}",
                ex.features.cols(),
                cfg.feature_dim
            )));
        }
        if let Some(&t) = ex.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Incompatible(format!(
                "example {i} uses token {t}, model vocabulary has {}",
                cfg.vocab_size
            )));
        }
        if mode == DecodeMode::Oracle && !ex.is_labeled() {
            return Err(Error::Incompatible(format!("example {i} has no transcription for oracle mode")));
        }
    }
    let hyps: Vec<Result<Hypothesis>> = map_indexed(parallelism, corpus, |_, ex| match mode {
        DecodeMode::Baseline => model.infer(&ex.features),
        DecodeMode::Oracle => model.infer_oracle(ex),
    });
    let mut report = CorpusReport {
        mode,
        score: ScoreReport::default(),
        class_score: class_map.map(|_| ScoreReport::default()),
        utterances: corpus.len(),
        length_exact: 0,
        length_within_one: 0,
        degenerate: 0,
    };
    for (ex, hyp) in corpus.iter().zip(hyps) {
        let hyp = hyp?;
        report.score.merge(&edit_distance(&ex.tokens, &hyp.tokens));
        if let (Some(map), Some(acc)) = (class_map, report.class_score.as_mut()) {
            acc.merge(&class_mapped_error(&ex.tokens, &hyp.tokens, map)?);
        }
        let diff = hyp.length.abs_diff(ex.tokens.len());
        report.length_exact += usize::from(diff == 0);
        report.length_within_one += usize::from(diff <= 1);
        report.degenerate += usize::from(hyp.degenerate);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edit_distance_examples() {
        let r = edit_distance(&[1, 2, 3], &[1, 2, 3]);
        assert_eq!(r.errors(), 0);
        assert_eq!(r.error_rate().unwrap(), 0.0);

        let r = edit_distance(&['a', 'b', 'c'], &['a', 'x', 'c']);
        assert_eq!((r.substitutions, r.deletions, r.insertions), (1, 0, 0));
        assert!((r.error_rate().unwrap() - 1.0 / 3.0).abs() < 1e-15);

        let r = edit_distance(&['a', 'b'], &[]);
        assert_eq!((r.substitutions, r.deletions, r.insertions), (0, 2, 0));
        assert_eq!(r.error_rate().unwrap(), 1.0);

        let r = edit_distance::<u8>(&[], &[1, 2]);
        assert_eq!(r.insertions, 2);
        assert!(matches!(r.error_rate(), Err(Error::EmptyReference)));
    }

    #[test]
    fn tie_break_prefers_substitution_then_insertion() {
        // [a] vs [b]: one substitution rather than an insertion plus a deletion
        let r = edit_distance(&['a'], &['b']);
        assert_eq!((r.substitutions, r.insertions, r.deletions), (1, 0, 0));
        // [a, b] vs [b, a]: two substitutions, same cost as ins + del
        let r = edit_distance(&['a', 'b'], &['b', 'a']);
        assert_eq!((r.substitutions, r.insertions, r.deletions), (2, 0, 0));
        // [a] vs [b, a]: insertion
        let r = edit_distance(&['a'], &['b', 'a']);
        assert_eq!((r.substitutions, r.insertions, r.deletions), (0, 1, 0));
    }

    #[test]
    fn class_mapping_examples() {
        let id = ClassMap::identity(4);
        let (r, h) = ([0, 1, 2], [0, 3, 2]);
        assert_eq!(class_mapped_error(&r, &h, &id).unwrap(), edit_distance(&r, &h));

        // 1 and 3 share a class: the substitution disappears
        let merged = ClassMap::from_ids(vec![0, 1, 2, 1]);
        assert_eq!(class_mapped_error(&r, &h, &merged).unwrap().errors(), 0);

        let all = ClassMap::from_ids(vec![0; 4]);
        assert_eq!(class_mapped_error(&[0, 1], &[3, 2], &all).unwrap().errors(), 0);

        assert!(matches!(
            class_mapped_error(&[0, 9], &[0], &id),
            Err(Error::Unmapped(9))
        ));
    }

    #[test]
    fn class_map_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map.tsv");
        std::fs::write(&p, "ni\tni3\nhao\thao3\nnii\tni3\n").unwrap();
        let vocab = Vocab::from_tokens(vec!["ni".into(), "hao".into(), "nii".into(), "x".into()]).unwrap();
        let map = ClassMap::load(&p, &vocab).unwrap();
        assert_eq!(map.class_of(0).unwrap(), map.class_of(2).unwrap());
        assert_ne!(map.class_of(0).unwrap(), map.class_of(1).unwrap());
        assert_eq!(map.class_name(map.class_of(1).unwrap()), Some("hao3"));
        assert!(matches!(map.class_of(3), Err(Error::Unmapped(3))));

        std::fs::write(&p, "zz\tq\n").unwrap();
        assert!(matches!(ClassMap::load(&p, &vocab), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("oracle".parse::<DecodeMode>().unwrap(), DecodeMode::Oracle);
        assert!("beam".parse::<DecodeMode>().is_err());
    }
}
