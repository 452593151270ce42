//! Procedural multi-accent, multi-speaker corpus.
//!
//! An accent is a pronunciation table (word to phonemes), a per-phoneme duration
//! multiplier and a spectral shift. A speaker is a timbre offset plus a noise level.
//! Alignment is exact by construction: every mel frame belongs to a known phoneme.
//!
//! A handful of phoneme pairs share almost the same template and differ mainly in
//! their typical length, the way long and short vowels do; accent substitution rules
//! frequently swap the members of such a pair.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::gaussian;
use crate::provenance::{read_json, write_json, Provenance, FORMAT_VERSION};
use crate::rng::stream;

pub type PhonemeId = usize;
pub type WordId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccentId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpeakerId(pub usize);

impl fmt::Display for AccentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "acc{}", self.0)
    }
}

impl fmt::Display for SpeakerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "spk{:02}", self.0)
    }
}

impl FromStr for AccentId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.strip_prefix("acc")
            .and_then(|n| n.parse().ok())
            .map(AccentId)
            .ok_or_else(|| Error::Lookup(format!("not an accent id: {s:?}")))
    }
}

impl FromStr for SpeakerId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.strip_prefix("spk")
            .and_then(|n| n.parse().ok())
            .map(SpeakerId)
            .ok_or_else(|| Error::Lookup(format!("not a speaker id: {s:?}")))
    }
}

/// T × D matrix of frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram(Array2<f64>);

impl MelSpectrogram {
    pub fn new(frames: Array2<f64>) -> Result<Self> {
        ensure!(frames.nrows() >= 1, Contract, "mel needs at least one frame");
        ensure!(frames.ncols() >= 1, Contract, "mel needs at least one channel");
        ensure!(
            frames.iter().all(|v| v.is_finite()),
            Numeric,
            "mel contains non-finite values"
        );
        Ok(Self(frames))
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_frames(self) -> Array2<f64> {
        self.0
    }

    pub fn frame_count(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

/// Phonemes with their frame durations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSequence {
    phonemes: Vec<PhonemeId>,
    durations: Vec<usize>,
}

impl PhonemeSequence {
    pub fn new(phonemes: Vec<PhonemeId>, durations: Vec<usize>) -> Result<Self> {
        ensure!(
            phonemes.len() == durations.len(),
            Contract,
            "{} phonemes but {} durations",
            phonemes.len(),
            durations.len()
        );
        ensure!(
            durations.iter().all(|&d| d >= 1),
            Contract,
            "durations must be at least one frame"
        );
        Ok(Self {
            phonemes,
            durations,
        })
    }

    pub fn phonemes(&self) -> &[PhonemeId] {
        &self.phonemes
    }

    pub fn durations(&self) -> &[usize] {
        &self.durations
    }

    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.durations.iter().sum()
    }

    /// Phoneme id of every frame, in order.
    pub fn frame_labels(&self) -> Vec<PhonemeId> {
        self.phonemes
            .iter()
            .zip(&self.durations)
            .flat_map(|(&p, &d)| std::iter::repeat_n(p, d))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccentSpec {
    pub accent_id: AccentId,
    pub remap_table: BTreeMap<WordId, Vec<PhonemeId>>,
    pub duration_multipliers: Vec<f64>,
    pub spectral_shift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub speaker_id: SpeakerId,
    pub native_accent: AccentId,
    pub timbre_offset: Vec<f64>,
    pub noise_level: f64,
}

/// Acoustic identity of every phoneme shared by all accents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhonemeInventory {
    /// One D-dimensional template per phoneme, row-major.
    pub templates: Vec<Vec<f64>>,
    /// Direction of the within-phoneme linear glide.
    pub trajectories: Vec<Vec<f64>>,
    pub base_durations: Vec<f64>,
    /// (short, long) pairs with near-identical templates.
    pub contrast_pairs: Vec<(PhonemeId, PhonemeId)>,
    /// Lag-one autocorrelation of the per-channel frame noise.
    pub noise_correlation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utterance_id: String,
    pub text: Vec<WordId>,
    pub speaker_id: SpeakerId,
    pub accent_id: AccentId,
    pub phoneme_seq: PhonemeSequence,
    pub mel: MelSpectrogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_accents: usize,
    pub n_speakers: usize,
    pub n_words: usize,
    pub n_phonemes: usize,
    pub utterances_per_speaker: usize,
    pub dim: usize,
    pub words_per_utterance: [usize; 2],
    pub word_length: [usize; 2],
    pub template_scale: f64,
    pub accent_shift_scale: f64,
    pub speaker_offset_scale: f64,
    /// Share of each speaker's utterances read in a randomly chosen non-native accent.
    pub non_native_fraction: f64,
    pub noise_level: [f64; 2],
    /// Lag-one autocorrelation of frame noise; speech spectra are smooth in time.
    pub noise_correlation: f64,
    pub trajectory_scale: f64,
    pub base_duration: [f64; 2],
    pub duration_multiplier: [f64; 2],
    pub duration_jitter: i64,
    pub contrast_pairs: usize,
    pub contrast_gap: f64,
    pub substitutions_per_accent: usize,
    pub length_change_fraction: f64,
    pub min_remap_difference: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_accents: 4,
            n_speakers: 8,
            n_words: 200,
            n_phonemes: 40,
            utterances_per_speaker: 50,
            dim: 16,
            words_per_utterance: [3, 6],
            word_length: [2, 5],
            template_scale: 1.0,
            accent_shift_scale: 0.3,
            speaker_offset_scale: 0.6,
            non_native_fraction: 0.25,
            noise_level: [0.03, 0.08],
            noise_correlation: 0.9,
            trajectory_scale: 0.5,
            base_duration: [2.0, 8.0],
            duration_multiplier: [0.6, 1.7],
            duration_jitter: 1,
            contrast_pairs: 6,
            contrast_gap: 0.05,
            substitutions_per_accent: 8,
            length_change_fraction: 0.08,
            min_remap_difference: 0.2,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_accents >= 2, Config, "n_accents must be at least 2");
        ensure!(self.n_speakers >= 2, Config, "n_speakers must be at least 2");
        ensure!(self.n_words >= 1, Config, "n_words must be positive");
        ensure!(self.n_phonemes >= 2, Config, "n_phonemes must be at least 2");
        ensure!(
            self.utterances_per_speaker >= 1,
            Config,
            "utterances_per_speaker must be positive"
        );
        ensure!(self.dim >= 1, Config, "dim must be positive");
        ensure!(
            1 <= self.words_per_utterance[0] && self.words_per_utterance[0] <= self.words_per_utterance[1],
            Config,
            "words_per_utterance must be a nonempty positive range"
        );
        ensure!(
            1 <= self.word_length[0] && self.word_length[0] <= self.word_length[1],
            Config,
            "word_length must be a nonempty positive range"
        );
        ensure!(
            0.0 < self.base_duration[0] && self.base_duration[0] <= self.base_duration[1],
            Config,
            "base_duration must be a positive range"
        );
        ensure!(
            0.0 < self.duration_multiplier[0]
                && self.duration_multiplier[0] <= self.duration_multiplier[1],
            Config,
            "duration multipliers must be strictly positive"
        );
        ensure!(
            0.0 <= self.noise_level[0] && self.noise_level[0] <= self.noise_level[1],
            Config,
            "noise_level must be a nonnegative range"
        );
        ensure!(
            (0.0..=1.0).contains(&self.non_native_fraction),
            Config,
            "non_native_fraction must lie in [0, 1]"
        );
        ensure!(
            (0.0..1.0).contains(&self.noise_correlation),
            Config,
            "noise_correlation must lie in [0, 1)"
        );
        ensure!(self.duration_jitter >= 0, Config, "duration_jitter must be nonnegative");
        ensure!(
            2 * self.contrast_pairs <= self.n_phonemes,
            Config,
            "too many contrast pairs for the phoneme inventory"
        );
        ensure!(
            self.substitutions_per_accent <= self.n_phonemes,
            Config,
            "more substitution rules than phonemes"
        );
        ensure!(
            (0.0..=1.0).contains(&self.length_change_fraction),
            Config,
            "length_change_fraction must lie in [0, 1]"
        );
        ensure!(
            (0.0..=1.0).contains(&self.min_remap_difference),
            Config,
            "min_remap_difference must lie in [0, 1]"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub inventory: PhonemeInventory,
    /// Accent-neutral pronunciation each accent table is derived from.
    pub lexicon: Vec<Vec<PhonemeId>>,
    pub accents: Vec<AccentSpec>,
    pub speakers: Vec<SpeakerSpec>,
    pub utterances: Vec<Utterance>,
}

/// Which utterances feed which stage.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorpusSplit {
    pub model: Vec<usize>,
    pub classifier: Vec<usize>,
    pub test: Vec<usize>,
}

fn vector<R: Rng + ?Sized>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let n: f64 = StandardNormal.sample(rng);
            n * scale
        })
        .collect()
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

fn build_inventory(cfg: &CorpusConfig, seed: u64) -> PhonemeInventory {
    let mut rng = stream(seed, "inventory", 0);
    let d = cfg.dim;
    let mut templates = gaussian(&mut rng, (cfg.n_phonemes, d), cfg.template_scale);
    let mut base_durations: Vec<f64> = (0..cfg.n_phonemes)
        .map(|_| uniform(&mut rng, cfg.base_duration))
        .collect();
    let mut contrast_pairs = Vec::with_capacity(cfg.contrast_pairs);
    for k in 0..cfg.contrast_pairs {
        let (short, long) = (2 * k, 2 * k + 1);
        let dir = Array1::from(vector(&mut rng, d, 1.0));
        let dir = &dir / dir.dot(&dir).sqrt().max(1e-12);
        let shifted = &templates.row(short) + &(dir * cfg.contrast_gap);
        templates.row_mut(long).assign(&shifted);
        base_durations[short] = cfg.base_duration[0];
        base_durations[long] = cfg.base_duration[1];
        contrast_pairs.push((short, long));
    }
    let mut trajectories = gaussian(&mut rng, (cfg.n_phonemes, d), cfg.trajectory_scale);
    for &(short, long) in &contrast_pairs {
        let shared = trajectories.row(short).to_owned();
        trajectories.row_mut(long).assign(&shared);
    }
    PhonemeInventory {
        templates: templates.rows().into_iter().map(|r| r.to_vec()).collect(),
        trajectories: trajectories.rows().into_iter().map(|r| r.to_vec()).collect(),
        base_durations,
        contrast_pairs,
        noise_correlation: cfg.noise_correlation,
    }
}

fn build_lexicon(cfg: &CorpusConfig, seed: u64) -> Vec<Vec<PhonemeId>> {
    let mut rng = stream(seed, "lexicon", 0);
    (0..cfg.n_words)
        .map(|_| {
            let len = rng.random_range(cfg.word_length[0]..=cfg.word_length[1]);
            (0..len).map(|_| rng.random_range(0..cfg.n_phonemes)).collect()
        })
        .collect()
}

/// Substitution rules for one accent: half swap contrast-pair members, the rest are
/// arbitrary phoneme replacements.
fn substitution_rules(
    cfg: &CorpusConfig,
    inventory: &PhonemeInventory,
    seed: u64,
    accent: usize,
) -> BTreeMap<PhonemeId, PhonemeId> {
    let mut rng = stream(seed, "rules", accent as u64);
    let mut rules = BTreeMap::new();
    let mut pairs = inventory.contrast_pairs.clone();
    pairs.shuffle(&mut rng);
    let n_pair_rules = (cfg.substitutions_per_accent / 2).min(pairs.len());
    for &(short, long) in pairs.iter().take(n_pair_rules) {
        if rng.random_bool(0.5) {
            rules.insert(short, long);
        } else {
            rules.insert(long, short);
        }
    }
    let mut candidates: Vec<PhonemeId> = (0..cfg.n_phonemes).collect();
    candidates.shuffle(&mut rng);
    for src in candidates {
        if rules.len() >= cfg.substitutions_per_accent {
            break;
        }
        if rules.contains_key(&src) {
            continue;
        }
        let mut dst = rng.random_range(0..cfg.n_phonemes);
        if dst == src {
            dst = (dst + 1) % cfg.n_phonemes;
        }
        rules.insert(src, dst);
    }
    rules
}

fn build_accent(
    cfg: &CorpusConfig,
    inventory: &PhonemeInventory,
    lexicon: &[Vec<PhonemeId>],
    seed: u64,
    accent: usize,
) -> AccentSpec {
    let rules = substitution_rules(cfg, inventory, seed, accent);
    let mut rng = stream(seed, "accent", accent as u64);
    let remap_table = lexicon
        .iter()
        .enumerate()
        .map(|(w, canonical)| {
            let mut pron: Vec<PhonemeId> = canonical
                .iter()
                .map(|p| *rules.get(p).unwrap_or(p))
                .collect();
            if rng.random_bool(cfg.length_change_fraction) {
                if pron.len() > 1 && rng.random_bool(0.5) {
                    let at = rng.random_range(0..pron.len());
                    pron.remove(at);
                } else {
                    let at = rng.random_range(0..=pron.len());
                    pron.insert(at, rng.random_range(0..cfg.n_phonemes));
                }
            }
            (w, pron)
        })
        .collect();
    let (lo, hi) = (cfg.duration_multiplier[0].ln(), cfg.duration_multiplier[1].ln());
    let duration_multipliers = (0..cfg.n_phonemes)
        .map(|_| uniform(&mut rng, [lo, hi]).exp())
        .collect();
    AccentSpec {
        accent_id: AccentId(accent),
        remap_table,
        duration_multipliers,
        spectral_shift: vector(&mut rng, cfg.dim, cfg.accent_shift_scale),
    }
}

/// Fraction of words whose pronunciation differs between two accents.
pub fn remap_difference(a: &AccentSpec, b: &AccentSpec) -> f64 {
    let n = a.remap_table.len().max(1);
    let differing = a
        .remap_table
        .iter()
        .filter(|(w, pron)| b.remap_table.get(w) != Some(pron))
        .count();
    differing as f64 / n as f64
}

/// Concatenated pronunciations of `text` under `accent`.
pub fn g2p(text: &[WordId], accent: &AccentSpec) -> Result<Vec<PhonemeId>> {
    let mut out = Vec::new();
    for w in text {
        let pron = accent.remap_table.get(w).ok_or_else(|| {
            Error::Lookup(format!("word {w} missing from {} table", accent.accent_id))
        })?;
        out.extend_from_slice(pron);
    }
    Ok(out)
}

/// Accent-scaled base durations plus integer jitter in `[-jitter, jitter]`, at least one frame.
pub fn assign_durations(
    phonemes: &[PhonemeId],
    accent: &AccentSpec,
    base_durations: &[f64],
    jitter: i64,
    seed: u64,
) -> Result<PhonemeSequence> {
    let mut rng = crate::rng::seeded(seed);
    let durations = phonemes
        .iter()
        .map(|&p| {
            let base = base_durations
                .get(p)
                .ok_or_else(|| Error::Lookup(format!("no base duration for phoneme {p}")))?;
            let mult = accent.duration_multipliers.get(p).ok_or_else(|| {
                Error::Lookup(format!("no duration multiplier for phoneme {p}"))
            })?;
            let noise = if jitter > 0 {
                rng.random_range(-jitter..=jitter)
            } else {
                0
            };
            Ok(((base * mult).round() as i64 + noise).max(1) as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    PhonemeSequence::new(phonemes.to_vec(), durations)
}

/// Frame `j` of a phoneme lasting `d` frames: template + accent shift + speaker offset
/// + a linear glide along the phoneme's trajectory + Gaussian noise.
pub fn render_mel(
    inventory: &PhonemeInventory,
    phoneme_seq: &PhonemeSequence,
    speaker: &SpeakerSpec,
    accent: &AccentSpec,
    seed: u64,
) -> Result<MelSpectrogram> {
    let dim = speaker.timbre_offset.len();
    let mut rng = crate::rng::seeded(seed);
    let mut frames = Array2::zeros((phoneme_seq.total_frames(), dim));
    let rho = inventory.noise_correlation;
    let mut noise = vec![0.0; dim];
    let mut t = 0;
    for (&p, &d) in phoneme_seq.phonemes().iter().zip(phoneme_seq.durations()) {
        let template = inventory
            .templates
            .get(p)
            .ok_or_else(|| Error::Lookup(format!("no template for phoneme {p}")))?;
        let glide = &inventory.trajectories[p];
        for j in 0..d {
            let pos = 2.0 * (j as f64 + 0.5) / d as f64 - 1.0;
            for c in 0..dim {
                let innovation: f64 = StandardNormal.sample(&mut rng);
                noise[c] = if t == 0 {
                    innovation
                } else {
                    rho * noise[c] + (1.0 - rho * rho).sqrt() * innovation
                };
                frames[[t, c]] = template[c]
                    + accent.spectral_shift[c]
                    + speaker.timbre_offset[c]
                    + glide[c] * pos
                    + speaker.noise_level * noise[c];
            }
            t += 1;
        }
    }
    MelSpectrogram::new(frames)
}

/// Builds the whole corpus; a pure function of `(config, seed)`.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let inventory = build_inventory(config, seed);
    let lexicon = build_lexicon(config, seed);
    let accents: Vec<AccentSpec> = (0..config.n_accents)
        .map(|a| build_accent(config, &inventory, &lexicon, seed, a))
        .collect();
    for i in 0..accents.len() {
        for j in i + 1..accents.len() {
            let diff = remap_difference(&accents[i], &accents[j]);
            ensure!(
                diff >= config.min_remap_difference,
                Config,
                "accents {} and {} differ on only {:.1}% of words (need {:.1}%)",
                accents[i].accent_id,
                accents[j].accent_id,
                100.0 * diff,
                100.0 * config.min_remap_difference
            );
        }
    }
    let speakers: Vec<SpeakerSpec> = (0..config.n_speakers)
        .map(|s| {
            let mut rng = stream(seed, "speaker", s as u64);
            SpeakerSpec {
                speaker_id: SpeakerId(s),
                native_accent: AccentId(s % config.n_accents),
                timbre_offset: vector(&mut rng, config.dim, config.speaker_offset_scale),
                noise_level: uniform(&mut rng, config.noise_level),
            }
        })
        .collect();
    let jobs: Vec<(usize, usize)> = (0..config.n_speakers)
        .flat_map(|s| (0..config.utterances_per_speaker).map(move |u| (s, u)))
        .collect();
    let utterances = jobs
        .par_iter()
        .map(|&(s, u)| {
            let index = (s * config.utterances_per_speaker + u) as u64;
            let speaker = &speakers[s];
            let mut rng = stream(seed, "accent-choice", index);
            let accent_index = if rng.random_bool(config.non_native_fraction) {
                let other = rng.random_range(0..config.n_accents - 1);
                if other >= speaker.native_accent.0 { other + 1 } else { other }
            } else {
                speaker.native_accent.0
            };
            let accent = &accents[accent_index];
            let mut rng = stream(seed, "text", index);
            let n_words =
                rng.random_range(config.words_per_utterance[0]..=config.words_per_utterance[1]);
            let text: Vec<WordId> = (0..n_words)
                .map(|_| rng.random_range(0..config.n_words))
                .collect();
            let phonemes = g2p(&text, accent)?;
            let phoneme_seq = assign_durations(
                &phonemes,
                accent,
                &inventory.base_durations,
                config.duration_jitter,
                crate::rng::derive_seed(seed, "durations", index),
            )?;
            let mel = render_mel(
                &inventory,
                &phoneme_seq,
                speaker,
                accent,
                crate::rng::derive_seed(seed, "mel", index),
            )?;
            Ok(Utterance {
                utterance_id: format!("{}_u{u:03}", speaker.speaker_id),
                text,
                speaker_id: speaker.speaker_id,
                accent_id: accent.accent_id,
                phoneme_seq,
                mel,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        config: config.clone(),
        seed,
        inventory,
        lexicon,
        accents,
        speakers,
        utterances,
    })
}

impl Corpus {
    pub fn accent(&self, id: AccentId) -> Result<&AccentSpec> {
        self.accents
            .get(id.0)
            .ok_or_else(|| Error::Lookup(format!("unknown accent {id}")))
    }

    pub fn speaker(&self, id: SpeakerId) -> Result<&SpeakerSpec> {
        self.speakers
            .get(id.0)
            .ok_or_else(|| Error::Lookup(format!("unknown speaker {id}")))
    }

    pub fn utterance(&self, id: &str) -> Result<&Utterance> {
        self.utterances
            .iter()
            .find(|u| u.utterance_id == id)
            .ok_or_else(|| Error::Lookup(format!("unknown utterance {id:?}")))
    }

    pub fn n_phonemes(&self) -> usize {
        self.config.n_phonemes
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Ground-truth durations the corpus would assign `phonemes` under `accent`, without jitter.
    pub fn expected_durations(&self, phonemes: &[PhonemeId], accent: AccentId) -> Result<Vec<f64>> {
        let spec = self.accent(accent)?;
        phonemes
            .iter()
            .map(|&p| {
                let base = self.inventory.base_durations.get(p).ok_or_else(|| {
                    Error::Lookup(format!("no base duration for phoneme {p}"))
                })?;
                Ok((base * spec.duration_multipliers[p]).round().max(1.0))
            })
            .collect()
    }

    /// Per speaker, the first `model_fraction` of utterances train the conversion
    /// models, the next `classifier_fraction` train the proxy classifiers and the rest
    /// are held out for testing.
    pub fn split(&self, model_fraction: f64, classifier_fraction: f64) -> Result<CorpusSplit> {
        ensure!(
            model_fraction > 0.0
                && classifier_fraction > 0.0
                && model_fraction + classifier_fraction < 1.0,
            Config,
            "split fractions must be positive and leave room for a test set"
        );
        let per = self.config.utterances_per_speaker;
        let n_model = ((per as f64) * model_fraction).round() as usize;
        let n_cls = ((per as f64) * classifier_fraction).round() as usize;
        ensure!(
            n_model >= 1 && n_cls >= 1 && n_model + n_cls < per,
            Config,
            "{per} utterances per speaker cannot fill every split"
        );
        let mut split = CorpusSplit::default();
        for (i, _) in self.utterances.iter().enumerate() {
            let u = i % per;
            if u < n_model {
                split.model.push(i);
            } else if u < n_model + n_cls {
                split.classifier.push(i);
            } else {
                split.test.push(i);
            }
        }
        Ok(split)
    }

    pub fn save(&self, dir: &Path, provenance: &Provenance) -> Result<()> {
        let utt_dir = dir.join("utterances");
        std::fs::create_dir_all(&utt_dir).map_err(|e| Error::io(&utt_dir, e))?;
        let manifest = CorpusManifest {
            format_version: FORMAT_VERSION,
            provenance: provenance.clone(),
            config: self.config.clone(),
            seed: self.seed,
            inventory: self.inventory.clone(),
            lexicon: self.lexicon.clone(),
            accents: self.accents.clone(),
            speakers: self.speakers.clone(),
            utterances: self
                .utterances
                .iter()
                .map(|u| UtteranceIndex {
                    utterance_id: u.utterance_id.clone(),
                    speaker_id: u.speaker_id,
                    accent_id: u.accent_id,
                    text: u.text.clone(),
                    file: format!("utterances/{}.json", u.utterance_id),
                })
                .collect(),
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        self.utterances.par_iter().try_for_each(|u| {
            write_json(
                &utt_dir.join(format!("{}.json", u.utterance_id)),
                &ArrayFile::from_parts(&u.utterance_id, &u.phoneme_seq, &u.mel, provenance),
            )
        })
    }

    pub fn load(dir: &Path) -> Result<(Self, Provenance)> {
        let manifest_path = dir.join("manifest.json");
        let manifest: CorpusManifest = read_json(&manifest_path)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                path: manifest_path,
                reason: format!("unsupported format version {}", manifest.format_version),
            });
        }
        let utterances = manifest
            .utterances
            .par_iter()
            .map(|entry| {
                let path = dir.join(&entry.file);
                let file: ArrayFile = read_json(&path)?;
                let (phoneme_seq, mel) = file.into_parts(&path)?;
                Ok(Utterance {
                    utterance_id: entry.utterance_id.clone(),
                    text: entry.text.clone(),
                    speaker_id: entry.speaker_id,
                    accent_id: entry.accent_id,
                    phoneme_seq,
                    mel,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let corpus = Corpus {
            config: manifest.config,
            seed: manifest.seed,
            inventory: manifest.inventory,
            lexicon: manifest.lexicon,
            accents: manifest.accents,
            speakers: manifest.speakers,
            utterances,
        };
        Ok((corpus, manifest.provenance))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct UtteranceIndex {
    utterance_id: String,
    speaker_id: SpeakerId,
    accent_id: AccentId,
    text: Vec<WordId>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusManifest {
    format_version: u32,
    provenance: Provenance,
    config: CorpusConfig,
    seed: u64,
    inventory: PhonemeInventory,
    lexicon: Vec<Vec<PhonemeId>>,
    accents: Vec<AccentSpec>,
    speakers: Vec<SpeakerSpec>,
    utterances: Vec<UtteranceIndex>,
}

/// Self-describing per-utterance array file: a mel matrix with its phoneme alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayFile {
    pub format_version: u32,
    pub provenance: Provenance,
    pub id: String,
    pub shape: [usize; 2],
    pub phonemes: Vec<PhonemeId>,
    pub durations: Vec<usize>,
    /// Row-major frames.
    pub frames: Vec<f64>,
}

impl ArrayFile {
    pub fn from_parts(
        id: &str,
        seq: &PhonemeSequence,
        mel: &MelSpectrogram,
        provenance: &Provenance,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            provenance: provenance.clone(),
            id: id.to_string(),
            shape: [mel.frame_count(), mel.dim()],
            phonemes: seq.phonemes().to_vec(),
            durations: seq.durations().to_vec(),
            frames: mel.frames().iter().copied().collect(),
        }
    }

    pub fn into_parts(self, path: &Path) -> Result<(PhonemeSequence, MelSpectrogram)> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if self.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", self.format_version)));
        }
        let frames = Array2::from_shape_vec((self.shape[0], self.shape[1]), self.frames)
            .map_err(|e| bad(e.to_string()))?;
        let seq = PhonemeSequence::new(self.phonemes, self.durations)?;
        let mel = MelSpectrogram::new(frames)?;
        Ok((seq, mel))
    }
}
