use imvalign_core::data::{
    gen_example, generate, is_monotone_surjection, load_vocab, prototypes, read_corpus, write_corpus, PrototypeKind,
    SynthTaskConfig, Vocab,
};
use imvalign_core::par::Parallelism;
use imvalign_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bits(t: &imvalign_core::Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn one_hot_prototypes_without_noise_reproduce_the_tokens() {
    let cfg = SynthTaskConfig {
        vocab_size: 5,
        feature_dim: 5,
        frames_min: 1,
        frames_max: 1,
        prototypes: PrototypeKind::OneHot,
        ..Default::default()
    };
    for ex in generate(&cfg, 0, 20, Parallelism::Sequential).unwrap() {
        assert_eq!(ex.frames(), ex.tokens.len());
        for (i, &y) in ex.tokens.iter().enumerate() {
            let row: Vec<f64> = (0..5).map(|k| f64::from(k == y)).collect();
            assert_eq!(ex.features.row(i), &row[..]);
        }
    }
}

#[test]
fn fixed_seed_gives_identical_examples() {
    let cfg = SynthTaskConfig {
        noise_std: 0.3,
        seed: 17,
        ..Default::default()
    };
    let a = generate(&cfg, 5, 10, Parallelism::Sequential).unwrap();
    let b = generate(&cfg, 5, 10, Parallelism::Parallel).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.tokens, y.tokens);
        assert_eq!(bits(&x.features), bits(&y.features));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = gen_example(&cfg, &prototypes(&cfg), &mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(gen_example(&cfg, &prototypes(&cfg), &mut rng).tokens, c.tokens);
}

#[test]
fn mean_frames_track_mean_tokens_times_mean_rate() {
    let cfg = SynthTaskConfig::default();
    let data = generate(&cfg, 0, 1000, Parallelism::Parallel).unwrap();
    let mean_t = data.iter().map(|e| e.frames() as f64).sum::<f64>() / 1000.0;
    let mean_l = data.iter().map(|e| e.tokens.len() as f64).sum::<f64>() / 1000.0;
    let rate = (cfg.frames_min + cfg.frames_max) as f64 / 2.0;
    assert!((mean_t / (mean_l * rate) - 1.0).abs() < 0.05, "mean T {mean_t}, mean L {mean_l}");
}

#[test]
fn generated_alignments_are_monotone_surjections() {
    let cfg = SynthTaskConfig {
        tokens_min: 1,
        tokens_max: 12,
        frames_min: 1,
        frames_max: 7,
        seed: 4,
        ..Default::default()
    };
    for ex in generate(&cfg, 0, 300, Parallelism::Parallel).unwrap() {
        let map = ex.true_alignment.as_ref().unwrap();
        assert!(is_monotone_surjection(map, ex.tokens.len()));
        assert_eq!(map.len(), ex.frames());
    }
}

#[test]
fn distinct_adjacent_tokens_never_repeat() {
    let cfg = SynthTaskConfig {
        vocab_size: 3,
        distinct_adjacent: true,
        ..Default::default()
    };
    let data = generate(&cfg, 0, 200, Parallelism::Sequential).unwrap();
    assert!(data.iter().all(|e| e.tokens.windows(2).all(|w| w[0] != w[1])));
    let used: std::collections::BTreeSet<usize> = data.iter().flat_map(|e| e.tokens.clone()).collect();
    assert_eq!(used.len(), 3);
}

#[test]
fn corpus_files_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthTaskConfig {
        noise_std: 0.7,
        ..Default::default()
    };
    let data = generate(&cfg, 0, 25, Parallelism::Sequential).unwrap();
    let path = dir.path().join("train.corpus");
    write_corpus(&path, &data).unwrap();
    let back = read_corpus(&path).unwrap();
    assert_eq!(back.len(), data.len());
    for (a, b) in data.iter().zip(&back) {
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.true_alignment, b.true_alignment);
        assert_eq!(bits(&a.features), bits(&b.features));
    }

    let empty = dir.path().join("empty.corpus");
    write_corpus(&empty, &[]).unwrap();
    assert!(read_corpus(&empty).unwrap().is_empty());
}

#[test]
fn damaged_corpus_files_give_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(&SynthTaskConfig::default(), 0, 3, Parallelism::Sequential).unwrap();
    let path = dir.path().join("c");
    write_corpus(&path, &data).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();

    let cut = dir.path().join("cut");
    std::fs::write(&cut, &text[..text.len() - 7]).unwrap();
    assert!(matches!(read_corpus(&cut), Err(Error::Truncated(_))));

    let header = text.lines().next().unwrap();
    let bumped = dir.path().join("bumped");
    let newer = header.replace(header.rsplit(' ').next().unwrap(), "v99");
    std::fs::write(&bumped, text.replacen(header, &newer, 1)).unwrap();
    assert!(matches!(read_corpus(&bumped), Err(Error::VersionMismatch { .. })));

    let junk = dir.path().join("junk");
    std::fs::write(&junk, "not a corpus\n").unwrap();
    assert!(matches!(read_corpus(&junk), Err(Error::CorruptHeader(_))));
}

#[test]
fn vocab_files_map_lines_to_ids() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("vocab.txt");
    std::fs::write(&p, "ba\nda\nga\n").unwrap();
    let v = load_vocab(&p).unwrap();
    assert_eq!(v.len(), 3);
    assert_eq!((v.id("ba"), v.id("ga")), (Some(0), Some(2)));

    std::fs::write(&p, "ba\nda\nba\n").unwrap();
    assert!(matches!(load_vocab(&p), Err(Error::DuplicateToken(t)) if t == "ba"));

    std::fs::write(&p, "").unwrap();
    let v = load_vocab(&p).unwrap();
    assert!(v.is_empty());
    assert!(v.encode(&["ba"]).is_err());

    let synth = Vocab::synthetic(4);
    let out = dir.path().join("synth.txt");
    synth.save(&out).unwrap();
    assert_eq!(load_vocab(&out).unwrap().tokens(), synth.tokens());
}
