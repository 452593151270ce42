mod common;

use flowconvert_core::attention::{
    denoising_examples, denoising_score, dropout_frames, positional_channels, time_dropout,
    train_attention, TimeDropoutConfig,
};
use flowconvert_core::nn::{gaussian, Linear, Params};
use flowconvert_core::rng::seeded;
use flowconvert_core::{
    AttentionBlock, AttentionConfig, FrameConditioning, LatentSequence, PhonemeSequence, TrainConfig,
};
use ndarray::{concatenate, s, Array2, Axis};
use proptest::prelude::*;

fn block(d: usize, c: usize, seed: u64) -> AttentionBlock {
    AttentionBlock::new(&AttentionConfig::default(), d, c, &mut seeded(seed))
}

fn sequence(durations: Vec<usize>) -> PhonemeSequence {
    let n = durations.len();
    PhonemeSequence::new((0..n).collect(), durations).unwrap()
}

fn affine(params: &Params, lin: &Linear, x: &Array2<f64>) -> Array2<f64> {
    x.dot(params.get(lin.w)) + params.get(lin.b)
}

/// Multi-head scaled dot-product attention written directly against the parameters.
fn reference_attend(
    b: &AttentionBlock,
    cond: &Array2<f64>,
    qpos: &Array2<f64>,
    z: &Array2<f64>,
    kpos: &Array2<f64>,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let q = affine(&b.params, &b.query_proj, &concatenate![Axis(1), *cond, *qpos]);
    let k = affine(&b.params, &b.key_proj, &concatenate![Axis(1), *z, *kpos]);
    let v = affine(&b.params, &b.value_proj, z);
    let hd = b.config.head_dim;
    let mut heads = Vec::new();
    let mut weights = Vec::new();
    for h in 0..b.config.n_heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) / (hd as f64).sqrt();
        for mut row in scores.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - m).exp());
            let total = row.sum();
            row /= total;
        }
        heads.push(scores.dot(&v.slice(cols)));
        weights.push(scores);
    }
    let views: Vec<_> = heads.iter().map(|h| h.view()).collect();
    let joined = concatenate(Axis(1), &views).unwrap();
    (affine(&b.params, &b.output_proj, &joined), weights)
}

fn durations(max_len: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_matches_reference_and_rows_sum_to_one(
        qd in durations(6),
        kd in durations(6),
        d in 1usize..6,
        c in 1usize..6,
        seed in any::<u64>(),
    ) {
        let b = block(d, c, seed);
        let (qs, ks) = (sequence(qd), sequence(kd));
        let cond = gaussian(&mut seeded(seed ^ 1), (qs.total_frames(), c), 1.0);
        let z = gaussian(&mut seeded(seed ^ 2), (ks.total_frames(), d), 1.0);
        let out = b
            .attend(&FrameConditioning::new(cond.clone()).unwrap(), &qs, &LatentSequence::new(z.clone()).unwrap(), &ks)
            .unwrap();
        prop_assert_eq!(out.frames.frame_count(), qs.total_frames());
        prop_assert_eq!(out.frames.dim(), d);
        prop_assert_eq!(out.weights.len(), b.config.n_heads);
        for w in &out.weights {
            prop_assert_eq!(w.dim(), (qs.total_frames(), ks.total_frames()));
            for row in w.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
        let n = b.config.n_frequencies;
        let (expected, weights) = reference_attend(
            &b,
            &cond,
            &positional_channels(qs.durations(), n),
            &z,
            &positional_channels(ks.durations(), n),
        );
        prop_assert!(common::max_abs_diff(out.frames.frames(), &expected) < 1e-10);
        for (a, r) in out.weights.iter().zip(&weights) {
            prop_assert!(common::max_abs_diff(a, r) < 1e-12);
        }
        let entropy = out.mean_entropy();
        prop_assert!(entropy >= -1e-12 && entropy <= (ks.total_frames() as f64).ln() + 1e-9);
    }

    #[test]
    fn identity_projections_give_convex_combinations(kd in durations(8), seed in any::<u64>()) {
        let cfg = AttentionConfig { n_heads: 2, head_dim: 2, ..AttentionConfig::default() };
        let mut b = AttentionBlock::new(&cfg, 4, 3, &mut seeded(seed));
        b.set_identity_value_output().unwrap();
        let ks = sequence(kd);
        let z = gaussian(&mut seeded(seed ^ 3), (ks.total_frames(), 4), 1.0);
        let cond = FrameConditioning::new(gaussian(&mut seeded(seed ^ 4), (ks.total_frames(), 3), 1.0)).unwrap();
        let out = b.attend(&cond, &ks, &LatentSequence::new(z.clone()).unwrap(), &ks).unwrap();
        for col in 0..4 {
            let lo = z.column(col).iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = z.column(col).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.frames.frames().column(col).iter().all(|&v| lo - 1e-12 <= v && v <= hi + 1e-12));
        }
    }

    #[test]
    fn time_dropout_zeroes_whole_frames_without_rescaling(
        t in 1usize..60,
        rate in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let z = gaussian(&mut seeded(seed), (t, 3), 1.0) + 5.0;
        let cfg = TimeDropoutConfig { rate, seed };
        let (out, keep) = dropout_frames(&z, &cfg).unwrap();
        prop_assert_eq!(keep.len(), t);
        for (r, &k) in keep.iter().enumerate() {
            if k {
                prop_assert_eq!(out.row(r), z.row(r));
            } else {
                prop_assert!(out.row(r).iter().all(|&v| v == 0.0));
            }
        }
        prop_assert_eq!(dropout_frames(&z, &cfg).unwrap(), (out.clone(), keep));
        let via_seq = time_dropout(&LatentSequence::new(z).unwrap(), &cfg).unwrap();
        prop_assert_eq!(via_seq.frames(), &out);
    }

    #[test]
    fn positions_track_phoneme_progress(d in durations(10), n in 1usize..6) {
        let pos = positional_channels(&d, n);
        prop_assert_eq!(pos.dim(), (d.iter().sum::<usize>(), 2 * n));
        for row in pos.rows() {
            for m in 0..n {
                prop_assert!((row[2 * m].powi(2) + row[2 * m + 1].powi(2) - 1.0).abs() < 1e-12);
            }
            // The lowest frequency encodes progress u in (0, 1) as angle pi * u.
            prop_assert!(row[0] > 0.0);
        }
        let first_cos: Vec<f64> = pos.column(1).to_vec();
        prop_assert!(first_cos.windows(2).all(|w| w[1] < w[0]));
    }
}

#[test]
fn dropout_rate_is_respected_on_average() {
    let z = Array2::ones((20_000, 1));
    for rate in [0.0, 0.3, 0.7, 1.0] {
        let (_, keep) = dropout_frames(&z, &TimeDropoutConfig { rate, seed: 5 }).unwrap();
        let dropped = keep.iter().filter(|&&k| !k).count() as f64 / keep.len() as f64;
        assert!((dropped - rate).abs() < 0.015, "rate {rate} dropped {dropped}");
    }
    assert!(dropout_frames(&z, &TimeDropoutConfig { rate: 1.5, seed: 5 }).is_err());
}

#[test]
fn attention_is_sensitive_to_key_order() {
    let b = block(4, 3, 8);
    let ks = sequence(vec![2, 3, 1, 2]);
    let t = ks.total_frames();
    let z = gaussian(&mut seeded(9), (t, 4), 1.0);
    let cond = FrameConditioning::new(gaussian(&mut seeded(10), (t, 3), 1.0)).unwrap();
    let reversed = z.slice(s![..;-1, ..]).to_owned();
    let a = b.attend(&cond, &ks, &LatentSequence::new(z).unwrap(), &ks).unwrap();
    let r = b.attend(&cond, &ks, &LatentSequence::new(reversed).unwrap(), &ks).unwrap();
    assert!(common::max_abs_diff(a.frames.frames(), r.frames.frames()) > 1e-3);
}

#[test]
fn rejects_mismatched_inputs() {
    let b = block(4, 3, 1);
    let ks = sequence(vec![2, 2]);
    let z = LatentSequence::new(Array2::zeros((4, 4))).unwrap();
    let cond = FrameConditioning::new(Array2::zeros((4, 3))).unwrap();
    assert!(b.attend(&cond, &sequence(vec![1, 2]), &z, &ks).is_err());
    let wide = FrameConditioning::new(Array2::zeros((4, 5))).unwrap();
    assert!(b.attend(&wide, &ks, &z, &ks).is_err());
}

fn schedule(steps: usize) -> TrainConfig {
    TrainConfig { steps, batch_size: 4, learning_rate: 2e-3, log_every: 0 }
}

#[test]
fn training_denoises_and_zero_steps_change_nothing() {
    let corpus = common::small_corpus(6);
    let models = common::generic_models(&corpus, 7);
    let n = models.attention.config.n_frequencies;
    let all: Vec<usize> = (0..corpus.utterances.len()).collect();
    let examples = denoising_examples(&corpus, &models.features, &models.flow, n, &all).unwrap();

    let mut untouched = models.attention.clone();
    let log = train_attention(&mut untouched, &examples, &schedule(0), 1).unwrap();
    assert!(log.curve.losses.is_empty());
    assert_eq!(untouched.params, models.attention.params);

    let run = |rate: f64, steps: usize| {
        let mut b = models.attention.clone();
        b.config.dropout_rate = rate;
        let log = train_attention(&mut b, &examples, &schedule(steps), 2).unwrap();
        (b, log)
    };
    let (trained, log) = run(0.3, 300);
    let (again, log_again) = run(0.3, 300);
    assert_eq!(trained.params, again.params);
    assert_eq!(log, log_again);

    let before = denoising_score(&models.attention, &examples, 0.3, 3).unwrap();
    let after = denoising_score(&trained, &examples, 0.3, 3).unwrap();
    assert!(after.attended_mse < before.attended_mse);
    assert!(after.attended_mse < after.corrupted_mse, "{after:?}");
    assert!(log.final_entropy.is_finite() && log.final_entropy > 0.0);

    let (_, clean_log) = run(0.0, 20);
    assert_eq!(clean_log.curve.losses.len(), 20);
    assert!(clean_log.final_entropy.is_finite());
}
