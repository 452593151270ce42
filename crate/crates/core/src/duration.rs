//! Duration model and warping matrices.
//!
//! The duration model shares the phoneme encoder architecture but keeps its own
//! parameters and accent table; a linear head predicts log-durations.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::features::{EmbeddingKind, EmbeddingTable, FeatureConfig, SequenceEncoder};
use crate::flow::LatentSequence;
use crate::nn::{sample_batch, Adam, Bound, Linear, LossCurve, Params, TrainConfig};
use crate::rng::stream;
use crate::syncorpus::{AccentId, Corpus, PhonemeId};

#[derive(Debug, Clone)]
pub struct DurationModel {
    pub params: Params,
    pub encoder: SequenceEncoder,
    pub accents: EmbeddingTable,
    pub head: Linear,
}

impl DurationModel {
    /// The head starts at zero, so every initial prediction is `exp(0) = 1` frame.
    pub fn new<R: Rng + ?Sized>(
        config: &FeatureConfig,
        n_phonemes: usize,
        n_accents: usize,
        rng: &mut R,
    ) -> Self {
        let mut params = Params::new();
        let accents = EmbeddingTable::new(
            &mut params,
            "duration.accent",
            EmbeddingKind::Accent,
            n_accents,
            config.accent_dim,
            rng,
        );
        let encoder = SequenceEncoder::new(
            &mut params,
            "duration.encoder",
            n_phonemes,
            config.accent_dim,
            config,
            rng,
        );
        let head = Linear::zeros(&mut params, "duration.head", encoder.out_dim, 1);
        Self {
            params,
            encoder,
            accents,
            head,
        }
    }

    /// `N × 1` predicted log-durations.
    pub fn log_durations_var(
        &self,
        tape: &mut Tape,
        p: &Bound,
        phonemes: &[PhonemeId],
        accent: AccentId,
    ) -> Result<Var> {
        let acc = self.accents.broadcast(tape, p, accent.0, 1)?;
        let enc = self.encoder.encode(tape, p, phonemes, acc)?;
        if phonemes.is_empty() {
            return Ok(tape.constant(Array2::zeros((0, 1))));
        }
        Ok(self.head.forward(tape, p, enc))
    }

    pub fn log_durations(&self, phonemes: &[PhonemeId], accent: AccentId) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let v = self.log_durations_var(&mut tape, &p, phonemes, accent)?;
        Ok(tape.value(v).column(0).to_vec())
    }
}

/// Nearest integer (ties up), at least one frame.
pub fn round_frames(frames: f64) -> usize {
    let d = (frames + 0.5).floor();
    if d.is_finite() && d >= 1.0 {
        d as usize
    } else {
        1
    }
}

pub fn round_duration(log_duration: f64) -> usize {
    round_frames(log_duration.exp())
}

/// `round(exp(prediction))`, clamped to at least 1, one per phoneme.
pub fn predict_durations(model: &DurationModel, phonemes: &[PhonemeId], accent: AccentId) -> Result<Vec<usize>> {
    Ok(model
        .log_durations(phonemes, accent)?
        .into_iter()
        .map(round_duration)
        .collect())
}

fn batch_loss(
    tape: &mut Tape,
    model: &DurationModel,
    p: &Bound,
    corpus: &Corpus,
    batch: &[usize],
) -> Result<Var> {
    let mut preds = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for &i in batch {
        let u = &corpus.utterances[i];
        preds.push(model.log_durations_var(tape, p, u.phoneme_seq.phonemes(), u.accent_id)?);
        targets.extend(u.phoneme_seq.durations().iter().map(|&d| (d as f64).ln()));
    }
    let n = targets.len();
    ensure!(n > 0, Contract, "duration batch has no phonemes");
    let pred = tape.concat_rows(&preds);
    let target = tape.constant(Array2::from_shape_vec((n, 1), targets).expect("column shape"));
    let diff = tape.sub(pred, target);
    let sq = tape.mul(diff, diff);
    Ok(tape.mean(sq))
}

/// L2 regression of log-durations on `indices`.
pub fn train_duration_model(
    model: &mut DurationModel,
    corpus: &Corpus,
    indices: &[usize],
    config: &TrainConfig,
    seed: u64,
) -> Result<LossCurve> {
    ensure!(!indices.is_empty(), Contract, "duration training needs utterances");
    let mut curve = LossCurve::default();
    let mut opt = Adam::new(&model.params, config.learning_rate);
    for step in 0..config.steps {
        let batch = sample_batch(indices, config.batch_size, &mut stream(seed, "duration-batch", step as u64));
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let loss = batch_loss(&mut tape, model, &p, corpus, &batch)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Training(format!("duration loss became {value} at step {step}")));
        }
        let grads = tape.backward(loss);
        let g = model.params.collect_grads(&p, &grads);
        opt.step(&mut model.params, &g);
        curve.push(step, value);
        if config.log_every > 0 && step % config.log_every == 0 {
            log::info!("duration step {step}: loss {value:.4}");
        }
    }
    Ok(curve)
}

/// Mean absolute error of predicted durations and the mean true duration over `indices`.
pub fn duration_mae(model: &DurationModel, corpus: &Corpus, indices: &[usize]) -> Result<(f64, f64)> {
    let (mut err, mut total, mut n) = (0.0, 0.0, 0usize);
    for &i in indices {
        let u = &corpus.utterances[i];
        let pred = predict_durations(model, u.phoneme_seq.phonemes(), u.accent_id)?;
        for (&p, &t) in pred.iter().zip(u.phoneme_seq.durations()) {
            err += (p as f64 - t as f64).abs();
            total += t as f64;
            n += 1;
        }
    }
    ensure!(n > 0, Contract, "no phonemes to score");
    Ok((err / n as f64, total / n as f64))
}

/// Sparse `T_target × T_source` interpolation matrix with at most two nonzeros per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpMatrix {
    rows: Vec<Vec<(usize, f64)>>,
    cols: usize,
}

impl WarpMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    /// Nonzero `(column, weight)` entries of row `r`.
    pub fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.rows[r]
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows(), self.cols));
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, w) in row {
                out[[r, c]] += w;
            }
        }
        out
    }

    /// `(row, col, weight)` triplets in row-major order.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().map(move |&(c, w)| (r, c, w)))
            .collect()
    }

    /// Text dump: a `rows cols` header, then one `row col weight` line per nonzero.
    pub fn dump(&self) -> String {
        let mut out = format!("{} {}\n", self.n_rows(), self.cols);
        for (r, c, w) in self.triplets() {
            writeln!(out, "{r} {c} {w:.17e}").expect("write to string");
        }
        out
    }

    pub fn parse_dump(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Contract(format!("malformed warp dump: {what}"));
        let mut lines = text.lines();
        let header: Vec<usize> = lines
            .next()
            .ok_or_else(|| bad("missing header"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("header")))
            .collect::<Result<_>>()?;
        ensure!(header.len() == 2, Contract, "malformed warp dump: header");
        let mut rows = vec![Vec::new(); header[0]];
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            ensure!(f.len() == 3, Contract, "malformed warp dump line {line:?}");
            let r: usize = f[0].parse().map_err(|_| bad(line))?;
            let c: usize = f[1].parse().map_err(|_| bad(line))?;
            let w: f64 = f[2].parse().map_err(|_| bad(line))?;
            ensure!(r < header[0] && c < header[1], Contract, "warp dump entry out of range");
            rows[r].push((c, w));
        }
        Ok(Self { rows, cols: header[1] })
    }
}

/// Center-aligned piecewise-linear interpolation inside each phoneme.
///
/// Target-local frame `j` of a phoneme with source span `s` and target span `t` reads
/// source-local position `p = (j + 0.5) s / t - 0.5`, clamped to `[0, s - 1]`.
pub fn build_warp_matrix(src_durations: &[usize], tgt_durations: &[usize]) -> Result<WarpMatrix> {
    ensure!(
        src_durations.len() == tgt_durations.len(),
        Contract,
        "warping needs equal phoneme counts, got {} and {}",
        src_durations.len(),
        tgt_durations.len()
    );
    ensure!(
        src_durations.iter().chain(tgt_durations).all(|&d| d >= 1),
        Contract,
        "durations must be positive"
    );
    let mut rows = Vec::with_capacity(tgt_durations.iter().sum());
    let mut col0 = 0;
    for (&s, &t) in src_durations.iter().zip(tgt_durations) {
        for j in 0..t {
            let p = ((2 * j + 1) * s) as f64 / (2 * t) as f64 - 0.5;
            let p = p.clamp(0.0, (s - 1) as f64);
            let lo = p.floor() as usize;
            let frac = p - lo as f64;
            if frac == 0.0 || lo + 1 >= s {
                rows.push(vec![(col0 + lo, 1.0)]);
            } else {
                rows.push(vec![(col0 + lo, 1.0 - frac), (col0 + lo + 1, frac)]);
            }
        }
        col0 += s;
    }
    Ok(WarpMatrix { rows, cols: col0 })
}

/// `z_warped = W z`.
pub fn warp(z: &LatentSequence, w: &WarpMatrix) -> Result<LatentSequence> {
    warp_frames(z.frames(), w).and_then(LatentSequence::new)
}

pub fn warp_frames(z: &Array2<f64>, w: &WarpMatrix) -> Result<Array2<f64>> {
    ensure!(
        w.n_cols() == z.nrows(),
        Contract,
        "warp matrix has {} columns but the sequence has {} frames",
        w.n_cols(),
        z.nrows()
    );
    let mut out = Array2::zeros((w.n_rows(), z.ncols()));
    for (r, row) in w.rows.iter().enumerate() {
        let mut dst = out.row_mut(r);
        for &(c, weight) in row {
            dst.scaled_add(weight, &z.row(c));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;

    #[test]
    fn equal_durations_give_identity() {
        let w = build_warp_matrix(&[2, 2], &[2, 2]).unwrap();
        assert_eq!(w.to_dense(), Array2::<f64>::eye(4));
    }

    #[test]
    fn stretch_by_two() {
        let w = build_warp_matrix(&[2], &[4]).unwrap();
        assert_eq!(
            w.to_dense(),
            array![[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]]
        );
        let z = LatentSequence::new(array![[0.0], [4.0]]).unwrap();
        assert_eq!(warp(&z, &w).unwrap().frames(), &array![[0.0], [1.0], [3.0], [4.0]]);
    }

    #[test]
    fn compress_to_one_frame_picks_the_middle() {
        let w = build_warp_matrix(&[3], &[1]).unwrap();
        assert_eq!(w.to_dense(), array![[0.0, 1.0, 0.0]]);
    }

    #[test]
    fn warp_errors() {
        assert!(matches!(build_warp_matrix(&[1, 2], &[1]), Err(Error::Contract(_))));
        assert!(matches!(build_warp_matrix(&[0], &[1]), Err(Error::Contract(_))));
        let w = build_warp_matrix(&[2], &[3]).unwrap();
        let z = LatentSequence::new(Array2::zeros((3, 2))).unwrap();
        assert!(matches!(warp(&z, &w), Err(Error::Contract(_))));
    }

    #[test]
    fn dump_roundtrips() {
        let w = build_warp_matrix(&[3, 1, 4], &[5, 2, 2]).unwrap();
        let text = w.dump();
        assert!(text.starts_with("9 8\n"));
        assert_eq!(WarpMatrix::parse_dump(&text).unwrap(), w);
    }

    #[test]
    fn zero_head_predicts_one_frame() {
        let model = DurationModel::new(&FeatureConfig::default(), 10, 3, &mut seeded(1));
        let d = predict_durations(&model, &[1, 4, 9, 0], AccentId(2)).unwrap();
        assert_eq!(d, vec![1, 1, 1, 1]);
        assert!(predict_durations(&model, &[], AccentId(0)).unwrap().is_empty());
        assert!(matches!(
            predict_durations(&model, &[10], AccentId(0)),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn rounding_ties_up_and_clamps() {
        assert_eq!(round_frames(2.5), 3);
        assert_eq!(round_frames(3.5), 4);
        assert_eq!(round_frames(1.4), 1);
        assert_eq!(round_frames(0.2), 1);
        assert_eq!(round_duration(1.4f64.ln()), 1);
        assert_eq!(round_duration(-10.0), 1);
        assert_eq!(round_duration(f64::NAN), 1);
    }
}
