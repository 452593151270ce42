mod common;

use flowconvert_core::duration::{
    build_warp_matrix, duration_mae, predict_durations, train_duration_model, warp, warp_frames,
};
use flowconvert_core::nn::gaussian;
use flowconvert_core::rng::seeded;
use flowconvert_core::{
    generate_corpus, AccentId, CorpusConfig, DurationModel, Error, FeatureConfig, LatentSequence,
    TrainConfig, WarpMatrix,
};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

/// numpy-style `interp`: piecewise-linear through `(xp, fp)`, constant beyond the ends.
fn interp(x: f64, xp: &[f64], fp: &[f64]) -> f64 {
    if x <= xp[0] {
        return fp[0];
    }
    if x >= xp[xp.len() - 1] {
        return fp[fp.len() - 1];
    }
    let k = xp.windows(2).position(|w| w[0] <= x && x <= w[1]).unwrap();
    let t = (x - xp[k]) / (xp[k + 1] - xp[k]);
    fp[k] + t * (fp[k + 1] - fp[k])
}

/// Resamples each phoneme span independently: source and target frames sit at cell
/// centres of the unit interval and target values are read off the source polyline.
fn oracle_resample(z: &Array2<f64>, src: &[usize], tgt: &[usize]) -> Array2<f64> {
    let d = z.ncols();
    let mut out = Array2::zeros((tgt.iter().sum(), d));
    let (mut s0, mut t0) = (0, 0);
    for (&s, &t) in src.iter().zip(tgt) {
        let centres: Vec<f64> = (0..s).map(|i| (i as f64 + 0.5) / s as f64).collect();
        for c in 0..d {
            let values: Vec<f64> = (0..s).map(|i| z[[s0 + i, c]]).collect();
            for j in 0..t {
                out[[t0 + j, c]] = interp((j as f64 + 0.5) / t as f64, &centres, &values);
            }
        }
        s0 += s;
        t0 += t;
    }
    out
}

fn durations() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..8).prop_flat_map(|n| (prop::collection::vec(1usize..12, n), prop::collection::vec(1usize..12, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn warp_matrix_laws((src, tgt) in durations(), seed in any::<u64>()) {
        let w = build_warp_matrix(&src, &tgt).unwrap();
        prop_assert_eq!(w.n_rows(), tgt.iter().sum::<usize>());
        prop_assert_eq!(w.n_cols(), src.iter().sum::<usize>());

        let mut spans = Vec::new();
        let mut s0 = 0;
        for (&s, &t) in src.iter().zip(&tgt) {
            for _ in 0..t {
                spans.push((s0, s0 + s));
            }
            s0 += s;
        }
        let mut last_col = 0;
        prop_assert_eq!(spans.len(), w.n_rows());
        for (r, span) in spans.iter().enumerate() {
            let row = w.row(r);
            prop_assert!(!row.is_empty() && row.len() <= 2);
            let sum: f64 = row.iter().map(|e| e.1).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            for &(c, v) in row {
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert!(span.0 <= c && c < span.1, "row {} col {} outside block", r, c);
            }
            let first = row[0].0;
            prop_assert!(first >= last_col);
            last_col = first;
        }

        let z = gaussian(&mut seeded(seed), (w.n_cols(), 3), 1.0);
        let warped = warp_frames(&z, &w).unwrap();
        let oracle = oracle_resample(&z, &src, &tgt);
        prop_assert!(common::max_abs_diff(&warped, &oracle) < 1e-9);
        prop_assert!(common::max_abs_diff(&warped, &w.to_dense().dot(&z)) < 1e-12);

        prop_assert_eq!(WarpMatrix::parse_dump(&w.dump()).unwrap(), w);
    }

    #[test]
    fn equal_durations_give_the_exact_identity(src in prop::collection::vec(1usize..12, 1..8)) {
        let w = build_warp_matrix(&src, &src).unwrap();
        prop_assert_eq!(w.to_dense(), Array2::<f64>::eye(src.iter().sum()));
    }

    #[test]
    fn constant_spans_stay_constant((src, tgt) in durations(), seed in any::<u64>()) {
        let values = gaussian(&mut seeded(seed), (src.len(), 2), 1.0);
        let mut z = Array2::zeros((src.iter().sum(), 2));
        let mut t = 0;
        for (k, &s) in src.iter().enumerate() {
            for _ in 0..s {
                z.row_mut(t).assign(&values.row(k));
                t += 1;
            }
        }
        let w = build_warp_matrix(&src, &tgt).unwrap();
        let out = warp(&LatentSequence::new(z).unwrap(), &w).unwrap().into_frames();
        let mut t = 0;
        for (k, &n) in tgt.iter().enumerate() {
            for _ in 0..n {
                let diff = &out.row(t) - &values.row(k);
                prop_assert!(diff.iter().all(|v| v.abs() < 1e-12));
                t += 1;
            }
        }
    }

    #[test]
    fn predictions_are_positive_and_one_per_phoneme(
        phonemes in prop::collection::vec(0usize..16, 0..20),
        accent in 0usize..3,
        seed in any::<u64>(),
    ) {
        let model = DurationModel::new(&FeatureConfig::default(), 16, 3, &mut seeded(seed));
        let d = predict_durations(&model, &phonemes, AccentId(accent)).unwrap();
        prop_assert_eq!(d.len(), phonemes.len());
        prop_assert!(d.iter().all(|&x| x >= 1));
    }
}

#[test]
fn worked_warp_examples() {
    let w = build_warp_matrix(&[2], &[4]).unwrap();
    let expected = ndarray::array![[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]];
    assert!(common::max_abs_diff(&w.to_dense(), &expected) < 1e-15);
    let z = ndarray::array![[0.0], [4.0]];
    let out = warp_frames(&z, &w).unwrap();
    assert_eq!(out.column(0).to_owned(), Array1::from(vec![0.0, 1.0, 3.0, 4.0]));
    let w = build_warp_matrix(&[3], &[1]).unwrap();
    assert_eq!(w.to_dense(), ndarray::array![[0.0, 1.0, 0.0]]);
    assert!(matches!(build_warp_matrix(&[1, 2], &[1]), Err(Error::Contract(_))));
    assert!(matches!(build_warp_matrix(&[0], &[1]), Err(Error::Contract(_))));
}

fn schedule(steps: usize) -> TrainConfig {
    TrainConfig { steps, batch_size: 8, learning_rate: 1e-3, log_every: 0 }
}

#[test]
fn zero_steps_leave_the_duration_model_untouched() {
    let corpus = common::small_corpus(2);
    let mut model = DurationModel::new(&FeatureConfig::default(), 16, 3, &mut seeded(1));
    let before = model.params.clone();
    let curve = train_duration_model(&mut model, &corpus, &[0, 1, 2], &schedule(0), 4).unwrap();
    assert!(curve.losses.is_empty());
    assert_eq!(model.params, before);
}

#[test]
fn trained_model_tracks_accent_multipliers() {
    let corpus = generate_corpus(&CorpusConfig::default(), 7).unwrap();
    let split = corpus.split(0.5, 0.3).unwrap();
    let c = &corpus.config;
    let mut model = DurationModel::new(&FeatureConfig::default(), c.n_phonemes, c.n_accents, &mut seeded(3));
    let run = |model: &mut DurationModel| train_duration_model(model, &corpus, &split.model, &schedule(1000), 5).unwrap();
    let curve = run(&mut model);
    let mut again = DurationModel::new(&FeatureConfig::default(), c.n_phonemes, c.n_accents, &mut seeded(3));
    assert_eq!(run(&mut again), curve);
    assert_eq!(again.params, model.params);

    let (mae, mean) = duration_mae(&model, &corpus, &split.test).unwrap();
    assert!(mae < 0.25 * mean, "mae {mae} mean {mean}");

    // The same phoneme sequence read in two accents: where the noiseless durations of a
    // phoneme differ by at least two frames, the slower accent should get the longer prediction.
    // Only (phoneme, accent) combinations seen often enough in training are compared.
    let mut seen = vec![vec![0usize; c.n_accents]; c.n_phonemes];
    for &i in &split.model {
        let u = &corpus.utterances[i];
        for &p in u.phoneme_seq.phonemes() {
            seen[p][u.accent_id.0] += 1;
        }
    }
    let mut pairs = 0;
    let mut agree = 0;
    for &i in &split.test {
        let phonemes = corpus.utterances[i].phoneme_seq.phonemes();
        let preds: Vec<Vec<f64>> = (0..c.n_accents)
            .map(|a| model.log_durations(phonemes, AccentId(a)).unwrap())
            .collect();
        for (k, &p) in phonemes.iter().enumerate() {
            for a in 0..c.n_accents {
                for b in 0..c.n_accents {
                    let base = corpus.inventory.base_durations[p];
                    let (ma, mb) = (corpus.accents[a].duration_multipliers[p], corpus.accents[b].duration_multipliers[p]);
                    if seen[p][a].min(seen[p][b]) >= 20 && (base * ma).round() >= (base * mb).round() + 2.0 {
                        pairs += 1;
                        agree += usize::from(preds[a][k] > preds[b][k]);
                    }
                }
            }
        }
    }
    assert!(pairs > 100);
    assert!(agree as f64 >= 0.9 * pairs as f64, "{agree} of {pairs} pairs ordered");
}
