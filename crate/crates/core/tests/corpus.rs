mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use flowconvert_core::syncorpus::{g2p, remap_difference};
use flowconvert_core::{generate_corpus, Corpus, CorpusConfig, Error, Provenance};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let key = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(key, fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn default_corpus_is_byte_identical_on_regeneration() {
    let cfg = CorpusConfig::default();
    let a = generate_corpus(&cfg, 7).unwrap();
    assert_eq!(a.utterances.len(), 400);
    let b = generate_corpus(&cfg, 7).unwrap();
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let prov = Provenance::new("cfg", 7);
    a.save(da.path(), &prov).unwrap();
    b.save(db.path(), &prov).unwrap();
    let (ta, tb) = (read_tree(da.path()), read_tree(db.path()));
    assert_eq!(ta.len(), 401);
    assert_eq!(ta, tb);

    let (loaded, p) = Corpus::load(da.path()).unwrap();
    assert_eq!(p, prov);
    assert_eq!(loaded, a);

    let c = generate_corpus(&cfg, 8).unwrap();
    assert!(a.utterances.iter().zip(&c.utterances).any(|(x, y)| x.mel != y.mel));
}

#[test]
fn output_does_not_depend_on_worker_count() {
    let cfg = common::small_config();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| generate_corpus(&cfg, 11).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn generated_specs_satisfy_their_invariants() {
    let corpus = generate_corpus(&CorpusConfig::default(), 7).unwrap();
    let n_words = corpus.config.n_words;
    for acc in &corpus.accents {
        assert_eq!(acc.remap_table.len(), n_words);
        assert!(acc.duration_multipliers.iter().all(|&m| m > 0.0));
        assert_eq!(acc.spectral_shift.len(), corpus.dim());
    }
    for (i, a) in corpus.accents.iter().enumerate() {
        for b in &corpus.accents[i + 1..] {
            assert!(remap_difference(a, b) >= 0.2);
            let differing: Vec<usize> = (0..n_words)
                .filter(|w| a.remap_table[w] != b.remap_table[w])
                .collect();
            let w = differing[0];
            assert_ne!(g2p(&[w, 0], a).unwrap(), g2p(&[w, 0], b).unwrap());
        }
    }
    for u in &corpus.utterances {
        assert_eq!(u.mel.frame_count(), u.phoneme_seq.total_frames());
        assert!(u.mel.frames().iter().all(|v| v.is_finite()));
        let accent = corpus.accent(u.accent_id).unwrap();
        assert_eq!(u.phoneme_seq.phonemes(), g2p(&u.text, accent).unwrap().as_slice());
    }
}

#[test]
fn every_speaker_also_reads_in_other_accents() {
    let corpus = generate_corpus(&CorpusConfig::default(), 7).unwrap();
    for spk in &corpus.speakers {
        let mine: Vec<_> = corpus.utterances.iter().filter(|u| u.speaker_id == spk.speaker_id).collect();
        let native = mine.iter().filter(|u| u.accent_id == spk.native_accent).count();
        let share = native as f64 / mine.len() as f64;
        assert!((0.6..=0.9).contains(&share), "{} native share {share}", spk.speaker_id);
    }
}

/// Least-squares one-vs-rest linear classifier on frame-averaged mels, fit on the
/// model and classifier splits and scored on the test split.
fn linear_probe_accuracy(corpus: &Corpus, label: impl Fn(usize) -> usize, n_labels: usize) -> f64 {
    let split = corpus.split(0.5, 0.3).unwrap();
    let d = corpus.dim();
    let features = |i: usize| {
        let mean = corpus.utterances[i].mel.frames().mean_axis(ndarray::Axis(0)).unwrap();
        let mut row: Vec<f64> = mean.to_vec();
        row.push(1.0);
        row
    };
    let train: Vec<usize> = split.model.iter().chain(&split.classifier).copied().collect();
    let x = DMatrix::from_fn(train.len(), d + 1, |r, c| features(train[r])[c]);
    let y = DMatrix::from_fn(train.len(), n_labels, |r, c| if label(train[r]) == c { 1.0 } else { 0.0 });
    let gram = x.transpose() * &x + DMatrix::identity(d + 1, d + 1) * 1e-6;
    let w = gram.try_inverse().unwrap() * x.transpose() * y;
    let hits = split
        .test
        .iter()
        .filter(|&&i| {
            let scores = DMatrix::from_row_slice(1, d + 1, &features(i)) * &w;
            scores.row(0).iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 == label(i)
        })
        .count();
    hits as f64 / split.test.len() as f64
}

#[test]
fn accents_and_speakers_are_linearly_separable() {
    let corpus = generate_corpus(&CorpusConfig::default(), 7).unwrap();
    let accent = linear_probe_accuracy(&corpus, |i| corpus.utterances[i].accent_id.0, 4);
    let speaker = linear_probe_accuracy(&corpus, |i| corpus.utterances[i].speaker_id.0, 8);
    assert!(accent >= 0.9, "accent probe accuracy {accent}");
    assert!(speaker >= 0.9, "speaker probe accuracy {speaker}");
}

#[test]
fn invalid_configs_are_rejected() {
    let base = common::small_config();
    for cfg in [
        CorpusConfig { n_words: 0, ..base.clone() },
        CorpusConfig { utterances_per_speaker: 0, ..base.clone() },
        CorpusConfig { noise_correlation: 1.0, ..base.clone() },
        CorpusConfig { non_native_fraction: 1.5, ..base.clone() },
        CorpusConfig { words_per_utterance: [3, 2], ..base.clone() },
    ] {
        assert!(matches!(generate_corpus(&cfg, 1), Err(Error::Config(_))));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn any_seed_gives_aligned_deterministic_corpora(seed in any::<u64>()) {
        let a = common::small_corpus(seed);
        prop_assert_eq!(&a, &common::small_corpus(seed));
        for u in &a.utterances {
            prop_assert_eq!(u.mel.frame_count(), u.phoneme_seq.total_frames());
            prop_assert!(u.phoneme_seq.durations().iter().all(|&d| d >= 1));
        }
    }
}
