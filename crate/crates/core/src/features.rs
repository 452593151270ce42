//! Conditioning stack: phoneme/speaker/accent embeddings, the phoneme encoder and
//! duration-driven upsampling to frame rate.
//!
//! Frame conditioning channel layout is fixed:
//! `[0, C_ph)` upsampled phoneme encodings, then `speaker_dim` speaker channels, then
//! `accent_dim` accent channels. Speaker and accent channels are constant over time.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
#[cfg(test)]
use crate::error::Error;
use crate::nn::{context_window, gaussian, Bound, Linear, ParamId, Params};
use crate::syncorpus::{AccentId, PhonemeId, PhonemeSequence, SpeakerId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub phoneme_embedding_dim: usize,
    pub encoder_dim: usize,
    pub speaker_dim: usize,
    pub accent_dim: usize,
    pub context_radius: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            phoneme_embedding_dim: 32,
            encoder_dim: 32,
            speaker_dim: 8,
            accent_dim: 4,
            context_radius: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Phoneme,
    Speaker,
    Accent,
}

/// Trainable lookup table keyed by symbolic id.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTable {
    pub kind: EmbeddingKind,
    pub vocab: usize,
    pub dim: usize,
    rows: ParamId,
}

impl EmbeddingTable {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        name: &str,
        kind: EmbeddingKind,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let rows = params.add(name, gaussian(rng, (vocab, dim), 1.0 / (dim as f64).sqrt()));
        Self {
            kind,
            vocab,
            dim,
            rows,
        }
    }

    fn check(&self, id: usize) -> Result<()> {
        ensure!(
            id < self.vocab,
            Lookup,
            "{:?} id {id} outside vocabulary of {}",
            self.kind,
            self.vocab
        );
        Ok(())
    }

    /// Rows for `ids`, one per id.
    pub fn lookup(&self, tape: &mut Tape, p: &Bound, ids: &[usize]) -> Result<Var> {
        for &id in ids {
            self.check(id)?;
        }
        Ok(tape.gather(p[self.rows], ids.iter().map(|&i| Some(i)).collect()))
    }

    /// The `1 × dim` row for `id`, repeated `times` times.
    pub fn broadcast(&self, tape: &mut Tape, p: &Bound, id: usize, times: usize) -> Result<Var> {
        self.check(id)?;
        Ok(tape.gather(p[self.rows], vec![Some(id); times]))
    }

    pub fn row(&self, params: &Params, id: usize) -> Result<Vec<f64>> {
        self.check(id)?;
        Ok(params.get(self.rows).row(id).to_vec())
    }
}

/// Embedding, input projection and two residual local-context mixing layers.
///
/// The accent embedding is concatenated to every position before encoding. The
/// duration model reuses this architecture with its own parameters.
#[derive(Debug, Clone)]
pub struct SequenceEncoder {
    embedding: EmbeddingTable,
    input: Linear,
    mixing: [Linear; 2],
    radius: usize,
    pub out_dim: usize,
}

impl SequenceEncoder {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        prefix: &str,
        n_phonemes: usize,
        accent_dim: usize,
        config: &FeatureConfig,
        rng: &mut R,
    ) -> Self {
        let e = config.phoneme_embedding_dim;
        let c = config.encoder_dim;
        let window = (2 * config.context_radius + 1) * c;
        Self {
            embedding: EmbeddingTable::new(
                params,
                &format!("{prefix}.embedding"),
                EmbeddingKind::Phoneme,
                n_phonemes,
                e,
                rng,
            ),
            input: Linear::new(params, &format!("{prefix}.input"), e + accent_dim, c, rng),
            mixing: [
                Linear::new(params, &format!("{prefix}.mix0"), window, c, rng),
                Linear::new(params, &format!("{prefix}.mix1"), window, c, rng),
            ],
            radius: config.context_radius,
            out_dim: c,
        }
    }

    pub fn vocab(&self) -> usize {
        self.embedding.vocab
    }

    /// `N × out_dim` encodings; `accent` is a `1 × accent_dim` row.
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        phonemes: &[PhonemeId],
        accent: Var,
    ) -> Result<Var> {
        let n = phonemes.len();
        let emb = self.embedding.lookup(tape, p, phonemes)?;
        if n == 0 {
            return Ok(tape.constant(Array2::zeros((0, self.out_dim))));
        }
        let acc = tape.gather(accent, vec![Some(0); n]);
        let joined = tape.concat_cols(&[emb, acc]);
        let mut h = self.input.forward(tape, p, joined);
        for layer in &self.mixing {
            let ctx = context_window(tape, h, self.radius);
            let mixed = layer.forward(tape, p, ctx);
            let act = tape.tanh(mixed);
            h = tape.add(h, act);
        }
        Ok(h)
    }
}

/// T × C frame-rate conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameConditioning(Array2<f64>);

impl FrameConditioning {
    pub fn new(frames: Array2<f64>) -> Result<Self> {
        ensure!(
            frames.iter().all(|v| v.is_finite()),
            Numeric,
            "conditioning contains non-finite values"
        );
        Ok(Self(frames))
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn frame_count(&self) -> usize {
        self.0.nrows()
    }

    pub fn channels(&self) -> usize {
        self.0.ncols()
    }
}

fn repeat_index(durations: &[usize]) -> Vec<Option<usize>> {
    durations
        .iter()
        .enumerate()
        .flat_map(|(k, &d)| std::iter::repeat_n(Some(k), d))
        .collect()
}

/// Repeats encoding `k` exactly `durations[k]` times, in order.
pub fn upsample(encodings: &Array2<f64>, durations: &[usize]) -> Result<FrameConditioning> {
    let mut tape = Tape::new();
    let enc = tape.constant(encodings.clone());
    let out = upsample_var(&mut tape, enc, durations)?;
    FrameConditioning::new(tape.value(out).clone())
}

/// Tape version of [`upsample`].
pub fn upsample_var(tape: &mut Tape, encodings: Var, durations: &[usize]) -> Result<Var> {
    let n = tape.shape(encodings).0;
    ensure!(
        durations.len() == n,
        Contract,
        "{n} encodings but {} durations",
        durations.len()
    );
    Ok(tape.gather(encodings, repeat_index(durations)))
}

/// Phoneme encoder plus speaker and accent tables; trained jointly with the flow.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub config: FeatureConfig,
    pub params: Params,
    pub encoder: SequenceEncoder,
    pub speakers: EmbeddingTable,
    pub accents: EmbeddingTable,
}

impl FeatureStack {
    pub fn new<R: Rng + ?Sized>(
        config: &FeatureConfig,
        n_phonemes: usize,
        n_speakers: usize,
        n_accents: usize,
        rng: &mut R,
    ) -> Self {
        let mut params = Params::new();
        let speakers = EmbeddingTable::new(
            &mut params,
            "features.speaker",
            EmbeddingKind::Speaker,
            n_speakers,
            config.speaker_dim,
            rng,
        );
        let accents = EmbeddingTable::new(
            &mut params,
            "features.accent",
            EmbeddingKind::Accent,
            n_accents,
            config.accent_dim,
            rng,
        );
        let encoder = SequenceEncoder::new(
            &mut params,
            "features.encoder",
            n_phonemes,
            config.accent_dim,
            config,
            rng,
        );
        Self {
            config: config.clone(),
            params,
            encoder,
            speakers,
            accents,
        }
    }

    /// Total conditioning channels `C_ph + speaker_dim + accent_dim`.
    pub fn cond_dim(&self) -> usize {
        self.encoder.out_dim + self.config.speaker_dim + self.config.accent_dim
    }

    pub fn phoneme_channels(&self) -> std::ops::Range<usize> {
        0..self.encoder.out_dim
    }

    pub fn speaker_channels(&self) -> std::ops::Range<usize> {
        let start = self.encoder.out_dim;
        start..start + self.config.speaker_dim
    }

    pub fn accent_channels(&self) -> std::ops::Range<usize> {
        let start = self.encoder.out_dim + self.config.speaker_dim;
        start..start + self.config.accent_dim
    }

    pub fn phoneme_encodings_var(
        &self,
        tape: &mut Tape,
        p: &Bound,
        phonemes: &[PhonemeId],
        accent: AccentId,
    ) -> Result<Var> {
        let acc = self.accents.broadcast(tape, p, accent.0, 1)?;
        self.encoder.encode(tape, p, phonemes, acc)
    }

    /// Per-phoneme encodings (N × C_ph) for inference.
    pub fn phoneme_encoder(&self, phonemes: &[PhonemeId], accent: AccentId) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let v = self.phoneme_encodings_var(&mut tape, &p, phonemes, accent)?;
        Ok(tape.value(v).clone())
    }

    /// Upsampled phoneme encodings with broadcast speaker and accent channels.
    pub fn conditioning_var(
        &self,
        tape: &mut Tape,
        p: &Bound,
        seq: &PhonemeSequence,
        speaker: SpeakerId,
        accent: AccentId,
    ) -> Result<Var> {
        let t = seq.total_frames();
        ensure!(t >= 1, Contract, "conditioning needs at least one frame");
        let enc = self.phoneme_encodings_var(tape, p, seq.phonemes(), accent)?;
        let frames = upsample_var(tape, enc, seq.durations())?;
        let spk = self.speakers.broadcast(tape, p, speaker.0, t)?;
        let acc = self.accents.broadcast(tape, p, accent.0, t)?;
        Ok(tape.concat_cols(&[frames, spk, acc]))
    }

    pub fn build_conditioning(
        &self,
        seq: &PhonemeSequence,
        speaker: SpeakerId,
        accent: AccentId,
    ) -> Result<FrameConditioning> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let v = self.conditioning_var(&mut tape, &p, seq, speaker, accent)?;
        FrameConditioning::new(tape.value(v).clone())
    }

    pub fn speaker_embedding(&self, speaker: SpeakerId) -> Result<Vec<f64>> {
        self.speakers.row(&self.params, speaker.0)
    }

    pub fn accent_embedding(&self, accent: AccentId) -> Result<Vec<f64>> {
        self.accents.row(&self.params, accent.0)
    }
}

/// Conditioning from explicit encodings and embedding vectors.
pub fn build_conditioning(
    encodings: &Array2<f64>,
    durations: &[usize],
    speaker_emb: &[f64],
    accent_emb: &[f64],
) -> Result<FrameConditioning> {
    let up = upsample(encodings, durations)?;
    let t = up.frame_count();
    ensure!(t >= 1, Contract, "conditioning needs at least one frame");
    let c_ph = encodings.ncols();
    let mut out = Array2::zeros((t, c_ph + speaker_emb.len() + accent_emb.len()));
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        let src = up.frames().row(r);
        for (c, v) in src.iter().chain(speaker_emb).chain(accent_emb).enumerate() {
            row[c] = *v;
        }
    }
    FrameConditioning::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;

    fn stack() -> FeatureStack {
        FeatureStack::new(&FeatureConfig::default(), 10, 3, 2, &mut seeded(4))
    }

    #[test]
    fn upsample_repeats_in_order() {
        let enc = array![[1.0, 1.5], [2.0, 2.5]];
        let up = upsample(&enc, &[2, 1]).unwrap();
        assert_eq!(up.frames(), &array![[1.0, 1.5], [1.0, 1.5], [2.0, 2.5]]);
        let one = upsample(&array![[7.0]], &[1]).unwrap();
        assert_eq!(one.frames(), &array![[7.0]]);
        let three = array![[0.0], [1.0], [2.0]];
        let up = upsample(&three, &[2, 3, 1]).unwrap();
        assert_eq!(up.frame_count(), 6);
        assert_eq!(up.frames()[[4, 0]], 1.0);
        assert!(matches!(upsample(&three, &[1, 1]), Err(Error::Contract(_))));
    }

    #[test]
    fn encoder_shapes_and_accent_sensitivity() {
        let s = stack();
        assert_eq!(s.phoneme_encoder(&[], AccentId(0)).unwrap().nrows(), 0);
        let a = s.phoneme_encoder(&[1, 2, 3, 4, 5], AccentId(0)).unwrap();
        let b = s.phoneme_encoder(&[1, 2, 3, 4, 5], AccentId(1)).unwrap();
        assert_eq!(a.dim(), (5, 32));
        assert_ne!(a, b);
        assert!(matches!(
            s.phoneme_encoder(&[10], AccentId(0)),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn conditioning_layout() {
        let s = stack();
        let seq = PhonemeSequence::new(vec![1, 2, 3], vec![3, 3, 4]).unwrap();
        let a = s.build_conditioning(&seq, SpeakerId(0), AccentId(1)).unwrap();
        assert_eq!(a.frames().dim(), (10, 44));
        let b = s.build_conditioning(&seq, SpeakerId(2), AccentId(1)).unwrap();
        for c in 0..44 {
            let same = (0..10).all(|t| a.frames()[[t, c]] == b.frames()[[t, c]]);
            assert_eq!(same, !s.speaker_channels().contains(&c), "channel {c}");
        }
        for c in s.speaker_channels().chain(s.accent_channels()) {
            assert!((0..10).all(|t| a.frames()[[t, c]] == a.frames()[[0, c]]));
        }
        let empty = PhonemeSequence::new(vec![], vec![]).unwrap();
        assert!(matches!(
            s.build_conditioning(&empty, SpeakerId(0), AccentId(0)),
            Err(Error::Contract(_))
        ));
        assert!(s.build_conditioning(&seq, SpeakerId(3), AccentId(0)).is_err());
    }

    #[test]
    fn explicit_conditioning_matches_stack() {
        let s = stack();
        let seq = PhonemeSequence::new(vec![4, 0], vec![2, 1]).unwrap();
        let enc = s.phoneme_encoder(seq.phonemes(), AccentId(0)).unwrap();
        let explicit = build_conditioning(
            &enc,
            seq.durations(),
            &s.speaker_embedding(SpeakerId(1)).unwrap(),
            &s.accent_embedding(AccentId(0)).unwrap(),
        )
        .unwrap();
        let via_stack = s.build_conditioning(&seq, SpeakerId(1), AccentId(0)).unwrap();
        assert_eq!(explicit, via_stack);
    }
}
