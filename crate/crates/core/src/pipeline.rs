//! The three conversion procedures built from trained components.
//!
//! All modes encode with `(ph_source, spk, acc_source)` and decode with
//! `(ph_target, spk, acc_target)`, keeping the source speaker on both sides. They
//! differ in how the latent sequence is brought to the target durations:
//! `remap` keeps source durations, `remap_warp` interpolates with a warping matrix
//! built from predicted durations, and `remap_warp_attend` lets the attention block
//! align the latents to predicted-duration target queries.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionBlock;
use crate::duration::{build_warp_matrix, predict_durations, warp, DurationModel};
use crate::error::{ensure, Error, Result};
use crate::features::FeatureStack;
use crate::flow::FlowModel;
use crate::syncorpus::{g2p, AccentId, AccentSpec, MelSpectrogram, PhonemeSequence, Utterance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Remap,
    RemapWarp,
    RemapWarpAttend,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Remap, Mode::RemapWarp, Mode::RemapWarpAttend];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Remap => "remap",
            Mode::RemapWarp => "remap_warp",
            Mode::RemapWarpAttend => "remap_warp_attend",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// Every trained component a conversion needs.
#[derive(Debug, Clone)]
pub struct ConversionModels {
    pub features: FeatureStack,
    pub flow: FlowModel,
    pub duration: DurationModel,
    pub attention: AttentionBlock,
}

#[derive(Debug, Clone)]
pub struct ConversionRequest<'a> {
    pub utterance: &'a Utterance,
    pub target_accent: AccentId,
    pub mode: Mode,
    /// Replaces predicted target durations in the warping modes.
    pub target_durations: Option<Vec<usize>>,
}

impl<'a> ConversionRequest<'a> {
    pub fn new(utterance: &'a Utterance, target_accent: AccentId, mode: Mode) -> Result<Self> {
        ensure!(
            target_accent != utterance.accent_id,
            Contract,
            "target accent {target_accent} equals the source accent of {}",
            utterance.utterance_id
        );
        Ok(Self {
            utterance,
            target_accent,
            mode,
            target_durations: None,
        })
    }

    /// Same-accent request, for reconstruction checks.
    pub fn reconstruction(utterance: &'a Utterance, mode: Mode) -> Self {
        Self {
            utterance,
            target_accent: utterance.accent_id,
            mode,
            target_durations: None,
        }
    }

    pub fn with_target_durations(mut self, durations: Vec<usize>) -> Self {
        self.target_durations = Some(durations);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConversionResult {
    pub mel: MelSpectrogram,
    pub target_phoneme_seq: PhonemeSequence,
    pub mode: Mode,
    pub diagnostics: BTreeMap<String, f64>,
}

fn latent_stats(diag: &mut BTreeMap<String, f64>, prefix: &str, z: &ndarray::Array2<f64>) {
    let n = z.len() as f64;
    let mean = z.sum() / n;
    let var = z.mapv(|v| (v - mean) * (v - mean)).sum() / n;
    diag.insert(format!("{prefix}_mean"), mean);
    diag.insert(format!("{prefix}_std"), var.sqrt());
}

fn target_phonemes(req: &ConversionRequest, accents: &[AccentSpec]) -> Result<Vec<usize>> {
    let spec = accents
        .get(req.target_accent.0)
        .ok_or_else(|| Error::Lookup(format!("unknown accent {}", req.target_accent)))?;
    g2p(&req.utterance.text, spec)
}

fn require_equal_length(req: &ConversionRequest, target: &[usize]) -> Result<()> {
    let source = req.utterance.phoneme_seq.len();
    if source != target.len() {
        return Err(Error::ModeUnsupported {
            mode: req.mode.to_string(),
            reason: format!(
                "{} has {source} source phonemes but {} target phonemes; use remap_warp_attend",
                req.utterance.utterance_id,
                target.len()
            ),
        });
    }
    Ok(())
}

fn target_durations(req: &ConversionRequest, models: &ConversionModels, phonemes: &[usize]) -> Result<Vec<usize>> {
    match &req.target_durations {
        Some(d) => {
            ensure!(
                d.len() == phonemes.len(),
                Contract,
                "{} duration overrides for {} target phonemes",
                d.len(),
                phonemes.len()
            );
            Ok(d.clone())
        }
        None => predict_durations(&models.duration, phonemes, req.target_accent),
    }
}

fn check_mode(req: &ConversionRequest, mode: Mode) -> Result<()> {
    ensure!(
        req.mode == mode,
        Contract,
        "request mode {} sent to the {mode} converter",
        req.mode
    );
    Ok(())
}

/// Encode under the source conditioning; returns latents and diagnostics.
fn encode(req: &ConversionRequest, models: &ConversionModels) -> Result<(crate::flow::LatentSequence, BTreeMap<String, f64>)> {
    let u = req.utterance;
    let cond = models
        .features
        .build_conditioning(&u.phoneme_seq, u.speaker_id, u.accent_id)?;
    let (z, log_det) = models.flow.inverse(&u.mel, &cond)?;
    let mut diag = BTreeMap::new();
    diag.insert("source_frames".into(), u.mel.frame_count() as f64);
    diag.insert("source_log_det".into(), log_det);
    latent_stats(&mut diag, "z_source", z.frames());
    Ok((z, diag))
}

/// Remap: decode the source latents under target phonemes and accent, source durations.
pub fn convert_remap(req: &ConversionRequest, models: &ConversionModels, accents: &[AccentSpec]) -> Result<ConversionResult> {
    check_mode(req, Mode::Remap)?;
    let target = target_phonemes(req, accents)?;
    require_equal_length(req, &target)?;
    let u = req.utterance;
    let seq = PhonemeSequence::new(target, u.phoneme_seq.durations().to_vec())?;
    let (z, mut diagnostics) = encode(req, models)?;
    let cond = models.features.build_conditioning(&seq, u.speaker_id, req.target_accent)?;
    let mel = models.flow.forward(&z, &cond)?;
    diagnostics.insert("target_frames".into(), mel.frame_count() as f64);
    Ok(ConversionResult {
        mel,
        target_phoneme_seq: seq,
        mode: Mode::Remap,
        diagnostics,
    })
}

/// Remap-warp: `z_warped = W z` with `W` from source and predicted target durations.
pub fn convert_remap_warp(
    req: &ConversionRequest,
    models: &ConversionModels,
    accents: &[AccentSpec],
) -> Result<ConversionResult> {
    check_mode(req, Mode::RemapWarp)?;
    let target = target_phonemes(req, accents)?;
    require_equal_length(req, &target)?;
    let u = req.utterance;
    let durations = target_durations(req, models, &target)?;
    let w = build_warp_matrix(u.phoneme_seq.durations(), &durations)?;
    let seq = PhonemeSequence::new(target, durations)?;
    let (z, mut diagnostics) = encode(req, models)?;
    let z_warped = warp(&z, &w)?;
    latent_stats(&mut diagnostics, "z_warped", z_warped.frames());
    diagnostics.insert("warp_nonzeros".into(), w.triplets().len() as f64);
    let cond = models.features.build_conditioning(&seq, u.speaker_id, req.target_accent)?;
    let mel = models.flow.forward(&z_warped, &cond)?;
    diagnostics.insert("target_frames".into(), mel.frame_count() as f64);
    Ok(ConversionResult {
        mel,
        target_phoneme_seq: seq,
        mode: Mode::RemapWarp,
        diagnostics,
    })
}

/// Remap-warp-attend: target queries at predicted durations attend over the source
/// latents; no equal-length restriction.
pub fn convert_remap_warp_attend(
    req: &ConversionRequest,
    models: &ConversionModels,
    accents: &[AccentSpec],
) -> Result<ConversionResult> {
    check_mode(req, Mode::RemapWarpAttend)?;
    let target = target_phonemes(req, accents)?;
    ensure!(!target.is_empty(), Contract, "target phoneme sequence is empty");
    let u = req.utterance;
    let durations = target_durations(req, models, &target)?;
    let seq = PhonemeSequence::new(target, durations)?;
    let (z, mut diagnostics) = encode(req, models)?;
    let queries = models.features.build_conditioning(&seq, u.speaker_id, req.target_accent)?;
    let attended = models.attention.attend(&queries, &seq, &z, &u.phoneme_seq)?;
    latent_stats(&mut diagnostics, "z_attended", attended.frames.frames());
    diagnostics.insert("attention_entropy".into(), attended.mean_entropy());
    let mel = models.flow.forward(&attended.frames, &queries)?;
    diagnostics.insert("target_frames".into(), mel.frame_count() as f64);
    Ok(ConversionResult {
        mel,
        target_phoneme_seq: seq,
        mode: Mode::RemapWarpAttend,
        diagnostics,
    })
}

/// Dispatches on `req.mode`.
pub fn convert(req: &ConversionRequest, models: &ConversionModels, accents: &[AccentSpec]) -> Result<ConversionResult> {
    match req.mode {
        Mode::Remap => convert_remap(req, models, accents),
        Mode::RemapWarp => convert_remap_warp(req, models, accents),
        Mode::RemapWarpAttend => convert_remap_warp_attend(req, models, accents),
    }
}

/// Converts every request in parallel; each result is independent of the others.
pub fn convert_batch(
    requests: &[ConversionRequest],
    models: &ConversionModels,
    accents: &[AccentSpec],
) -> Vec<Result<ConversionResult>> {
    requests.par_iter().map(|r| convert(r, models, accents)).collect()
}
