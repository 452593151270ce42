//! Attention aligner: frame-rate phoneme queries attend over latent frames.
//!
//! Queries are `[conditioning, position]`, keys are `[z, position]` and values are
//! `z`. The position of a frame is its phoneme progress
//! `u = (k + (j + 0.5) / d_k) / N` (phoneme `k` of `N`, frame `j` of `d_k`), encoded
//! as `sin(pi 2^m u), cos(pi 2^m u)`. Progress is comparable between sequences of
//! different lengths, which is what lets a target query find its source frames.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::features::{FeatureStack, FrameConditioning};
use crate::flow::{FlowModel, LatentSequence};
use crate::nn::{sample_batch, Adam, Bound, Linear, LossCurve, Params, TrainConfig};
use crate::rng::stream;
use crate::syncorpus::{Corpus, PhonemeSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub head_dim: usize,
    /// Number of sinusoid frequencies; positions use twice as many channels.
    pub n_frequencies: usize,
    /// Initial gain of the position-matching block of the query and key maps.
    pub position_gain: f64,
    pub dropout_rate: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            n_heads: 2,
            head_dim: 16,
            n_frequencies: 8,
            position_gain: 2.0,
            dropout_rate: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeDropoutConfig {
    pub rate: f64,
    pub seed: u64,
}

/// Zeroes each frame independently with probability `rate`; survivors are not rescaled.
pub fn time_dropout(z: &LatentSequence, cfg: &TimeDropoutConfig) -> Result<LatentSequence> {
    let (frames, _) = dropout_frames(z.frames(), cfg)?;
    LatentSequence::new(frames)
}

/// Corrupted frames and the per-frame keep mask.
pub fn dropout_frames(z: &Array2<f64>, cfg: &TimeDropoutConfig) -> Result<(Array2<f64>, Vec<bool>)> {
    ensure!(
        (0.0..=1.0).contains(&cfg.rate),
        Contract,
        "dropout rate {} outside [0, 1]",
        cfg.rate
    );
    let mut rng = stream(cfg.seed, "time-dropout", 0);
    let keep: Vec<bool> = (0..z.nrows()).map(|_| rng.random::<f64>() >= cfg.rate).collect();
    let mut out = z.clone();
    for (mut row, &k) in out.rows_mut().into_iter().zip(&keep) {
        if !k {
            row.fill(0.0);
        }
    }
    Ok((out, keep))
}

/// Phoneme-progress sinusoids for every frame of `durations` (`T × 2 n_frequencies`).
pub fn positional_channels(durations: &[usize], n_frequencies: usize) -> Array2<f64> {
    let n = durations.len() as f64;
    let total: usize = durations.iter().sum();
    let mut out = Array2::zeros((total, 2 * n_frequencies));
    let mut t = 0;
    for (k, &d) in durations.iter().enumerate() {
        for j in 0..d {
            let u = (k as f64 + (j as f64 + 0.5) / d as f64) / n;
            for m in 0..n_frequencies {
                let angle = std::f64::consts::PI * (1u64 << m) as f64 * u;
                out[[t, 2 * m]] = angle.sin();
                out[[t, 2 * m + 1]] = angle.cos();
            }
            t += 1;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub config: AttentionConfig,
    pub data_dim: usize,
    pub cond_dim: usize,
    pub params: Params,
    pub query_proj: Linear,
    pub key_proj: Linear,
    pub value_proj: Linear,
    pub output_proj: Linear,
}

/// Attended frames plus the per-head attention weights (`T_q × T_s` each).
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub frames: LatentSequence,
    pub weights: Vec<Array2<f64>>,
}

impl AttentionOutput {
    /// Mean Shannon entropy (nats) of the attention rows, averaged over heads.
    pub fn mean_entropy(&self) -> f64 {
        mean_entropy(&self.weights)
    }
}

fn mean_entropy(weights: &[Array2<f64>]) -> f64 {
    let mut total = 0.0;
    let mut rows = 0usize;
    for w in weights {
        for row in w.rows() {
            total -= row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
            rows += 1;
        }
    }
    if rows == 0 {
        0.0
    } else {
        total / rows as f64
    }
}

impl AttentionBlock {
    /// Random projections, except that every head's query and key maps start by
    /// copying the positional channels with gain `position_gain`, so the initial
    /// attention already prefers frames at matching phoneme progress.
    pub fn new<R: Rng + ?Sized>(config: &AttentionConfig, data_dim: usize, cond_dim: usize, rng: &mut R) -> Self {
        let inner = config.n_heads * config.head_dim;
        let pos = 2 * config.n_frequencies;
        let mut params = Params::new();
        let query_proj = Linear::new(&mut params, "attention.query", cond_dim + pos, inner, rng);
        let key_proj = Linear::new(&mut params, "attention.key", data_dim + pos, inner, rng);
        let value_proj = Linear::new(&mut params, "attention.value", data_dim, inner, rng);
        let output_proj = Linear::new(&mut params, "attention.output", inner, data_dim, rng);
        for (proj, offset) in [(query_proj, cond_dim), (key_proj, data_dim)] {
            let w = params.get_mut(proj.w);
            for h in 0..config.n_heads {
                for c in 0..pos.min(config.head_dim) {
                    w[[offset + c, h * config.head_dim + c]] = config.position_gain;
                }
            }
        }
        Self {
            config: config.clone(),
            data_dim,
            cond_dim,
            params,
            query_proj,
            key_proj,
            value_proj,
            output_proj,
        }
    }

    /// Sets value and output projections to the identity (needs `n_heads * head_dim == D`).
    pub fn set_identity_value_output(&mut self) -> Result<()> {
        let inner = self.config.n_heads * self.config.head_dim;
        ensure!(
            inner == self.data_dim,
            Contract,
            "identity projections need {inner} == {}",
            self.data_dim
        );
        for proj in [self.value_proj, self.output_proj] {
            *self.params.get_mut(proj.w) = Array2::eye(inner);
            self.params.get_mut(proj.b).fill(0.0);
        }
        Ok(())
    }

    fn positions(&self, seq: &PhonemeSequence) -> Array2<f64> {
        positional_channels(seq.durations(), self.config.n_frequencies)
    }

    /// Attention over `z` with `T_q × C` query conditioning and positions. Returns
    /// the output node and the per-head weight nodes.
    pub fn attend_var(
        &self,
        tape: &mut Tape,
        p: &Bound,
        queries: Var,
        query_pos: Var,
        z: Var,
        key_pos: Var,
    ) -> (Var, Vec<Var>) {
        let hd = self.config.head_dim;
        let qin = tape.concat_cols(&[queries, query_pos]);
        let q = self.query_proj.forward(tape, p, qin);
        let kin = tape.concat_cols(&[z, key_pos]);
        let k = self.key_proj.forward(tape, p, kin);
        let v = self.value_proj.forward(tape, p, z);
        let mut heads = Vec::with_capacity(self.config.n_heads);
        let mut weights = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = tape.slice_cols(q, h * hd, (h + 1) * hd);
            let kh = tape.slice_cols(k, h * hd, (h + 1) * hd);
            let vh = tape.slice_cols(v, h * hd, (h + 1) * hd);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, 1.0 / (hd as f64).sqrt());
            let a = tape.softmax_rows(scores);
            heads.push(tape.matmul(a, vh));
            weights.push(a);
        }
        let joined = tape.concat_cols(&heads);
        (self.output_proj.forward(tape, p, joined), weights)
    }

    /// `T_q × D` output: one attended latent frame per query frame.
    ///
    /// `query_seq` and `key_seq` supply the durations behind the query and latent
    /// frames, from which the positional channels are derived.
    pub fn attend(
        &self,
        queries: &FrameConditioning,
        query_seq: &PhonemeSequence,
        z: &LatentSequence,
        key_seq: &PhonemeSequence,
    ) -> Result<AttentionOutput> {
        ensure!(
            queries.frame_count() >= 1 && z.frame_count() >= 1,
            Contract,
            "attention needs nonempty queries and keys"
        );
        ensure!(
            queries.frame_count() == query_seq.total_frames() && z.frame_count() == key_seq.total_frames(),
            Contract,
            "sequence durations do not match frame counts"
        );
        ensure!(
            queries.channels() == self.cond_dim && z.dim() == self.data_dim,
            Contract,
            "attention expects {} query and {} latent channels, got {} and {}",
            self.cond_dim,
            self.data_dim,
            queries.channels(),
            z.dim()
        );
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let qv = tape.constant(queries.frames().clone());
        let qp = tape.constant(self.positions(query_seq));
        let zv = tape.constant(z.frames().clone());
        let kp = tape.constant(self.positions(key_seq));
        let (out, weights) = self.attend_var(&mut tape, &p, qv, qp, zv, kp);
        Ok(AttentionOutput {
            frames: LatentSequence::new(tape.value(out).clone())?,
            weights: weights.iter().map(|&w| tape.value(w).clone()).collect(),
        })
    }
}

/// Frozen-flow material for one utterance.
#[derive(Debug, Clone)]
pub struct DenoisingExample {
    pub z: Array2<f64>,
    pub cond: Array2<f64>,
    pub pos: Array2<f64>,
}

/// Latents and source conditioning for `indices`, computed in parallel.
pub fn denoising_examples(
    corpus: &Corpus,
    features: &FeatureStack,
    flow: &FlowModel,
    n_frequencies: usize,
    indices: &[usize],
) -> Result<Vec<DenoisingExample>> {
    indices
        .par_iter()
        .map(|&i| {
            let u = &corpus.utterances[i];
            let cond = features.build_conditioning(&u.phoneme_seq, u.speaker_id, u.accent_id)?;
            let (z, _) = flow.inverse(&u.mel, &cond)?;
            Ok(DenoisingExample {
                z: z.into_frames(),
                cond: cond.frames().clone(),
                pos: positional_channels(u.phoneme_seq.durations(), n_frequencies),
            })
        })
        .collect()
}

/// Held-out denoising quality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoisingScore {
    /// MSE between the block output on corrupted latents and the clean latents.
    pub attended_mse: f64,
    /// MSE between the corrupted latents themselves and the clean latents.
    pub corrupted_mse: f64,
    /// Mean attention-row entropy; values near zero on clean input signal identity collapse.
    pub mean_entropy: f64,
}

/// Scores `block` on `examples`, corrupting example `i` with dropout seed `(seed, i)`.
pub fn denoising_score(
    block: &AttentionBlock,
    examples: &[DenoisingExample],
    rate: f64,
    seed: u64,
) -> Result<DenoisingScore> {
    ensure!(!examples.is_empty(), Contract, "no examples to score");
    let parts: Vec<(f64, f64, f64, usize, usize)> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let cfg = TimeDropoutConfig {
                rate,
                seed: crate::rng::derive_seed(seed, "denoise-eval", i as u64),
            };
            let (noisy, _) = dropout_frames(&ex.z, &cfg)?;
            let mut tape = Tape::new();
            let p = block.params.bind_frozen(&mut tape);
            let q = tape.constant(ex.cond.clone());
            let qp = tape.constant(ex.pos.clone());
            let zv = tape.constant(noisy.clone());
            let kp = tape.constant(ex.pos.clone());
            let (out, weights) = block.attend_var(&mut tape, &p, q, qp, zv, kp);
            let att = (tape.value(out) - &ex.z).mapv(|v| v * v).sum();
            let cor = (&noisy - &ex.z).mapv(|v| v * v).sum();
            let w: Vec<_> = weights.iter().map(|&w| tape.value(w).clone()).collect();
            let rows = w.len() * ex.z.nrows();
            Ok((att, cor, mean_entropy(&w) * rows as f64, rows, ex.z.len()))
        })
        .collect::<Result<_>>()?;
    let (mut att, mut cor, mut ent, mut rows, mut n) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for (a, c, e, r, k) in parts {
        att += a;
        cor += c;
        ent += e;
        rows += r;
        n += k;
    }
    Ok(DenoisingScore {
        attended_mse: att / n as f64,
        corrupted_mse: cor / n as f64,
        mean_entropy: ent / rows as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrainLog {
    pub curve: LossCurve,
    /// Mean attention entropy on the last training batch.
    pub final_entropy: f64,
}

/// L2 denoising: attend(source queries, time_dropout(z)) regresses the clean `z`.
/// The flow is not involved beyond the precomputed examples.
pub fn train_attention(
    block: &mut AttentionBlock,
    examples: &[DenoisingExample],
    config: &TrainConfig,
    seed: u64,
) -> Result<AttentionTrainLog> {
    ensure!(!examples.is_empty(), Contract, "attention training needs examples");
    let rate = block.config.dropout_rate;
    let pool: Vec<usize> = (0..examples.len()).collect();
    let mut curve = LossCurve::default();
    let mut opt = Adam::new(&block.params, config.learning_rate);
    let mut final_entropy = f64::NAN;
    for step in 0..config.steps {
        let batch = sample_batch(&pool, config.batch_size, &mut stream(seed, "attention-batch", step as u64));
        let mut tape = Tape::new();
        let p = block.params.bind(&mut tape);
        let mut losses = Vec::with_capacity(batch.len());
        let mut weights = Vec::new();
        let mut count = 0usize;
        for (slot, &i) in batch.iter().enumerate() {
            let ex = &examples[i];
            let cfg = TimeDropoutConfig {
                rate,
                seed: crate::rng::derive_seed(seed, "attention-dropout", (step * config.batch_size + slot) as u64),
            };
            let (noisy, _) = dropout_frames(&ex.z, &cfg)?;
            let q = tape.constant(ex.cond.clone());
            let qp = tape.constant(ex.pos.clone());
            let zv = tape.constant(noisy);
            let kp = tape.constant(ex.pos.clone());
            let (out, w) = block.attend_var(&mut tape, &p, q, qp, zv, kp);
            let clean = tape.constant(ex.z.clone());
            let diff = tape.sub(out, clean);
            let sq = tape.mul(diff, diff);
            losses.push(tape.sum(sq));
            weights.extend(w);
            count += ex.z.len();
        }
        let total = tape.concat_rows(&losses);
        let total = tape.sum(total);
        let loss = tape.scale(total, 1.0 / count as f64);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Training(format!("attention loss became {value} at step {step}")));
        }
        if step + 1 == config.steps {
            let w: Vec<_> = weights.iter().map(|&w| tape.value(w).clone()).collect();
            final_entropy = mean_entropy(&w);
        }
        let grads = tape.backward(loss);
        let g = block.params.collect_grads(&p, &grads);
        opt.step(&mut block.params, &g);
        curve.push(step, value);
        if config.log_every > 0 && step % config.log_every == 0 {
            log::info!("attention step {step}: loss {value:.4}");
        }
    }
    Ok(AttentionTrainLog { curve, final_entropy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gaussian;
    use crate::rng::seeded;

    fn seq(durations: Vec<usize>) -> PhonemeSequence {
        let n = durations.len();
        PhonemeSequence::new((0..n).collect(), durations).unwrap()
    }

    #[test]
    fn dropout_extremes_and_rate() {
        let z = LatentSequence::new(gaussian(&mut seeded(1), (1000, 4), 1.0)).unwrap();
        let none = time_dropout(&z, &TimeDropoutConfig { rate: 0.0, seed: 3 }).unwrap();
        assert_eq!(none, z);
        let all = time_dropout(&z, &TimeDropoutConfig { rate: 1.0, seed: 3 }).unwrap();
        assert!(all.frames().iter().all(|&v| v == 0.0));
        let (_, keep) = dropout_frames(z.frames(), &TimeDropoutConfig { rate: 0.3, seed: 3 }).unwrap();
        let dropped = keep.iter().filter(|k| !**k).count() as f64 / 1000.0;
        assert!((0.25..=0.35).contains(&dropped), "{dropped}");
        assert!(matches!(
            time_dropout(&z, &TimeDropoutConfig { rate: 1.5, seed: 3 }),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn output_follows_query_length() {
        let block = AttentionBlock::new(&AttentionConfig::default(), 16, 6, &mut seeded(2));
        let q = FrameConditioning::new(gaussian(&mut seeded(3), (7, 6), 1.0)).unwrap();
        let z = LatentSequence::new(gaussian(&mut seeded(4), (13, 16), 1.0)).unwrap();
        let out = block.attend(&q, &seq(vec![3, 4]), &z, &seq(vec![5, 5, 3])).unwrap();
        assert_eq!(out.frames.frames().dim(), (7, 16));
        for w in &out.weights {
            for row in w.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_copies_its_value() {
        let cfg = AttentionConfig {
            n_heads: 1,
            head_dim: 4,
            ..AttentionConfig::default()
        };
        let mut block = AttentionBlock::new(&cfg, 4, 3, &mut seeded(5));
        block.set_identity_value_output().unwrap();
        let q = FrameConditioning::new(gaussian(&mut seeded(6), (5, 3), 1.0)).unwrap();
        let z = LatentSequence::new(ndarray::array![[1.0, -2.0, 0.5, 3.0]]).unwrap();
        let out = block.attend(&q, &seq(vec![5]), &z, &seq(vec![1])).unwrap();
        for row in out.frames.frames().rows() {
            for (a, b) in row.iter().zip(z.frames().row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let block = AttentionBlock::new(&AttentionConfig::default(), 4, 3, &mut seeded(2));
        let q = FrameConditioning::new(Array2::zeros((0, 3)));
        if let Ok(q) = q {
            let z = LatentSequence::new(Array2::zeros((2, 4))).unwrap();
            let empty = PhonemeSequence::new(vec![], vec![]).unwrap();
            assert!(block.attend(&q, &empty, &z, &seq(vec![2])).is_err());
        }
        let q = FrameConditioning::new(Array2::zeros((2, 3))).unwrap();
        let z = LatentSequence::new(Array2::zeros((2, 5))).unwrap();
        assert!(matches!(
            block.attend(&q, &seq(vec![2]), &z, &seq(vec![2])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn positions_depend_only_on_progress() {
        let a = positional_channels(&[2], 3);
        let b = positional_channels(&[1, 1], 3);
        assert_eq!(a.dim(), (2, 6));
        assert!((&a - &b).iter().all(|v| v.abs() < 1e-12));
        let c = positional_channels(&[4], 1);
        assert!((c[[0, 0]] - (std::f64::consts::PI * 0.125).sin()).abs() < 1e-12);
    }
}
