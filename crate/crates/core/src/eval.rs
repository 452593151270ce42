//! Objective evaluation: phoneme error rate, proxy classifiers, paired t-tests with
//! Holm–Bonferroni correction and accent score-ratio matrices.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::autodiff::{softmax_rows, Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::nn::{context_window, sample_batch, Adam, Bound, Linear, LossCurve, Params, TrainConfig};
use crate::pipeline::Mode;
use crate::rng::stream;
use crate::syncorpus::{AccentId, Corpus, MelSpectrogram, PhonemeId, SpeakerId};

/// `(substitutions + insertions + deletions) / |reference|` via minimal edit distance.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    ensure!(!reference.is_empty(), Contract, "reference must be nonempty");
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[hypothesis.len()] as f64 / reference.len() as f64)
}

/// Merges consecutive duplicates.
pub fn collapse_runs<T: PartialEq + Copy>(labels: &[T]) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for &l in labels {
        if out.last() != Some(&l) {
            out.push(l);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Accent,
    Speaker,
    Phoneme,
}

impl ClassifierKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::Accent => "accent",
            ClassifierKind::Speaker => "speaker",
            ClassifierKind::Phoneme => "phoneme",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub accent_context: usize,
    pub speaker_context: usize,
    pub phoneme_context: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            accent_context: 3,
            speaker_context: 0,
            phoneme_context: 3,
        }
    }
}

/// Small frame classifier.
///
/// The phoneme classifier subtracts the per-utterance channel mean first, so it
/// cannot key on the constant speaker timbre or accent colouring. Accent and speaker
/// classifiers mean-pool hidden frames into one utterance-level prediction; the
/// phoneme classifier labels frames.
#[derive(Debug, Clone)]
pub struct ProxyClassifier {
    pub kind: ClassifierKind,
    pub n_labels: usize,
    pub dim: usize,
    pub context: usize,
    pub params: Params,
    hidden0: Linear,
    hidden1: Linear,
    out: Linear,
    pub trained: bool,
}

impl ProxyClassifier {
    pub fn new<R: Rng + ?Sized>(
        kind: ClassifierKind,
        n_labels: usize,
        dim: usize,
        config: &ClassifierConfig,
        rng: &mut R,
    ) -> Self {
        let context = match kind {
            ClassifierKind::Accent => config.accent_context,
            ClassifierKind::Speaker => config.speaker_context,
            ClassifierKind::Phoneme => config.phoneme_context,
        };
        let prefix = format!("classifier.{}", kind.as_str());
        let mut params = Params::new();
        let h = config.hidden;
        let hidden0 = Linear::new(&mut params, &format!("{prefix}.hidden0"), (2 * context + 1) * dim, h, rng);
        let hidden1 = Linear::new(&mut params, &format!("{prefix}.hidden1"), h, h, rng);
        let out = Linear::new(&mut params, &format!("{prefix}.out"), h, n_labels, rng);
        Self {
            kind,
            n_labels,
            dim,
            context,
            params,
            hidden0,
            hidden1,
            out,
            trained: false,
        }
    }

    fn normalizes(&self) -> bool {
        self.kind == ClassifierKind::Phoneme
    }

    fn prepare(&self, frames: &Array2<f64>) -> Array2<f64> {
        if self.normalizes() {
            let mean = frames.mean_axis(Axis(0)).expect("nonempty frames");
            frames - &mean
        } else {
            frames.clone()
        }
    }

    /// Logits: `1 × K` for pooled kinds, `T × K` for the phoneme classifier.
    fn logits_var(&self, tape: &mut Tape, p: &Bound, frames: &Array2<f64>) -> Var {
        let x = tape.constant(self.prepare(frames));
        let x = context_window(tape, x, self.context);
        let h = self.hidden0.forward(tape, p, x);
        let h = self.activate(tape, h);
        let h = self.hidden1.forward(tape, p, h);
        let h = self.activate(tape, h);
        let h = if self.kind == ClassifierKind::Phoneme {
            h
        } else {
            tape.mean_rows(h)
        };
        self.out.forward(tape, p, h)
    }

    fn activate(&self, tape: &mut Tape, h: Var) -> Var {
        if self.kind == ClassifierKind::Phoneme {
            tape.tanh(h)
        } else {
            tape.relu(h)
        }
    }

    fn check_input(&self, mel: &MelSpectrogram) -> Result<()> {
        ensure!(self.trained, Contract, "{} classifier is untrained", self.kind.as_str());
        ensure!(
            mel.dim() == self.dim,
            Contract,
            "classifier expects {} channels, got {}",
            self.dim,
            mel.dim()
        );
        Ok(())
    }

    /// Class probabilities: one row per utterance (pooled kinds) or per frame (phoneme).
    pub fn probabilities(&self, mel: &MelSpectrogram) -> Result<Array2<f64>> {
        self.check_input(mel)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let logits = self.logits_var(&mut tape, &p, mel.frames());
        Ok(softmax_rows(tape.value(logits)))
    }

    /// Most probable label of a pooled classifier.
    pub fn predict(&self, mel: &MelSpectrogram) -> Result<usize> {
        let probs = self.probabilities(mel)?;
        Ok(argmax(probs.row(0).iter().copied()))
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn labels_for(kind: ClassifierKind, corpus: &Corpus, i: usize) -> Vec<usize> {
    let u = &corpus.utterances[i];
    match kind {
        ClassifierKind::Accent => vec![u.accent_id.0],
        ClassifierKind::Speaker => vec![u.speaker_id.0],
        ClassifierKind::Phoneme => u.phoneme_seq.frame_labels(),
    }
}

/// Cross-entropy training on real corpus utterances `indices`.
pub fn train_classifier(
    classifier: &mut ProxyClassifier,
    corpus: &Corpus,
    indices: &[usize],
    config: &TrainConfig,
    seed: u64,
) -> Result<LossCurve> {
    ensure!(!indices.is_empty(), Contract, "classifier training needs utterances");
    let tag = format!("classifier-{}", classifier.kind.as_str());
    let mut curve = LossCurve::default();
    let mut opt = Adam::new(&classifier.params, config.learning_rate);
    for step in 0..config.steps {
        let batch = sample_batch(indices, config.batch_size, &mut stream(seed, &tag, step as u64));
        let mut tape = Tape::new();
        let p = classifier.params.bind(&mut tape);
        let mut logits = Vec::with_capacity(batch.len());
        let mut labels = Vec::new();
        for &i in &batch {
            logits.push(classifier.logits_var(&mut tape, &p, corpus.utterances[i].mel.frames()));
            labels.extend(labels_for(classifier.kind, corpus, i));
        }
        let all = tape.concat_rows(&logits);
        let loss = tape.cross_entropy(all, labels);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Training(format!(
                "{} classifier loss became {value} at step {step}",
                classifier.kind.as_str()
            )));
        }
        let grads = tape.backward(loss);
        let g = classifier.params.collect_grads(&p, &grads);
        opt.step(&mut classifier.params, &g);
        curve.push(step, value);
        if config.log_every > 0 && step % config.log_every == 0 {
            log::info!("{tag} step {step}: loss {value:.4}");
        }
    }
    classifier.trained = true;
    Ok(curve)
}

/// Accuracy on real utterances (per frame for the phoneme classifier).
pub fn classifier_accuracy(classifier: &ProxyClassifier, corpus: &Corpus, indices: &[usize]) -> Result<f64> {
    let counts: Vec<(usize, usize)> = indices
        .par_iter()
        .map(|&i| {
            let probs = classifier.probabilities(&corpus.utterances[i].mel)?;
            let labels = labels_for(classifier.kind, corpus, i);
            let hits = probs
                .rows()
                .into_iter()
                .zip(&labels)
                .filter(|(row, &l)| argmax(row.iter().copied()) == l)
                .count();
            Ok((hits, labels.len()))
        })
        .collect::<Result<_>>()?;
    let (hits, n) = counts.iter().fold((0, 0), |(a, b), (h, k)| (a + h, b + k));
    ensure!(n > 0, Contract, "nothing to score");
    Ok(hits as f64 / n as f64)
}

/// Frame-wise argmax phonemes with consecutive duplicates merged.
pub fn phoneme_decode(mel: &MelSpectrogram, classifier: &ProxyClassifier) -> Result<Vec<PhonemeId>> {
    ensure!(
        classifier.kind == ClassifierKind::Phoneme,
        Contract,
        "phoneme decoding needs the phoneme classifier"
    );
    ensure!(mel.frame_count() >= 1, Contract, "cannot decode an empty spectrogram");
    let probs = classifier.probabilities(mel)?;
    let labels: Vec<_> = probs.rows().into_iter().map(|r| argmax(r.iter().copied())).collect();
    Ok(collapse_runs(&labels))
}

/// Probability mass a pooled classifier puts on `label`.
pub fn similarity_score(mel: &MelSpectrogram, classifier: &ProxyClassifier, label: usize) -> Result<f64> {
    ensure!(
        classifier.kind != ClassifierKind::Phoneme,
        Contract,
        "similarity needs an utterance-level classifier"
    );
    if label >= classifier.n_labels {
        return Err(Error::Lookup(format!(
            "label {label} outside the {} {} classes",
            classifier.n_labels,
            classifier.kind.as_str()
        )));
    }
    Ok(classifier.probabilities(mel)?[[0, label]])
}

/// Two-sided paired t-test on `a - b` with `n - 1` degrees of freedom.
///
/// With zero variance of the differences, a zero mean difference gives `p = 1` and any
/// other mean is a contract error.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure!(a.len() == b.len(), Contract, "paired samples differ in length");
    ensure!(a.len() >= 2, Contract, "paired t-test needs at least two pairs");
    ensure!(
        a.iter().chain(b).all(|v| v.is_finite()),
        Numeric,
        "non-finite score in t-test"
    );
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        ensure!(
            mean == 0.0,
            Contract,
            "differences are constant ({mean}); the t statistic is undefined"
        );
        return Ok(1.0);
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok((2.0 * dist.cdf(-t.abs())).min(1.0))
}

/// Holm step-down: with p-values sorted ascending, reject while
/// `p_(i) <= alpha / (m - i)` (0-indexed). Decisions follow the input order.
pub fn holm_bonferroni(p_values: &[f64], alpha: f64) -> Result<Vec<bool>> {
    ensure!(
        alpha > 0.0 && alpha < 1.0,
        Contract,
        "alpha must lie in (0, 1), got {alpha}"
    );
    ensure!(
        p_values.iter().all(|p| (0.0..=1.0).contains(p)),
        Contract,
        "p-values must lie in [0, 1]"
    );
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].total_cmp(&p_values[j]).then(i.cmp(&j)));
    let mut reject = vec![false; m];
    for (rank, &i) in order.iter().enumerate() {
        if p_values[i] <= alpha / (m - rank) as f64 {
            reject[i] = true;
        } else {
            break;
        }
    }
    Ok(reject)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum RatioCell {
    /// Diagonal: no conversion into the source accent.
    Absent,
    /// No scored utterances for this pair.
    Missing,
    Ratio(f64),
}

impl RatioCell {
    pub fn value(self) -> Option<f64> {
        match self {
            RatioCell::Ratio(v) => Some(v),
            _ => None,
        }
    }

    fn render(self) -> String {
        match self {
            RatioCell::Absent => "-".into(),
            RatioCell::Missing => "missing".into(),
            RatioCell::Ratio(v) => format!("{v:.6}"),
        }
    }
}

/// Rows are source accents, columns target accents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioMatrix {
    pub accents: Vec<AccentId>,
    pub cells: Vec<Vec<RatioCell>>,
}

impl RatioMatrix {
    pub fn get(&self, source: AccentId, target: AccentId) -> RatioCell {
        self.cells[source.0][target.0]
    }

    fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["source\\target".to_string()];
        header.extend(self.accents.iter().map(|a| a.to_string()));
        w.write_record(&header).map_err(csv_error)?;
        for (a, row) in self.accents.iter().zip(&self.cells) {
            let mut rec = vec![a.to_string()];
            rec.extend(row.iter().map(|c| c.render()));
            w.write_record(&rec).map_err(csv_error)?;
        }
        finish_csv(w)
    }
}

/// Cell `(s, t)` is the mean converted score over `converted[(s, t)]` divided by the
/// mean reference score of accent `t`. Empty cells are reported as missing.
pub fn score_ratio_matrix(
    n_accents: usize,
    converted: &BTreeMap<(AccentId, AccentId), Vec<f64>>,
    reference: &BTreeMap<AccentId, Vec<f64>>,
) -> Result<RatioMatrix> {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut cells = vec![vec![RatioCell::Missing; n_accents]; n_accents];
    for (s, row) in cells.iter_mut().enumerate() {
        for (t, cell) in row.iter_mut().enumerate() {
            if s == t {
                *cell = RatioCell::Absent;
                continue;
            }
            let conv = converted.get(&(AccentId(s), AccentId(t))).filter(|v| !v.is_empty());
            let refs = reference.get(&AccentId(t)).filter(|v| !v.is_empty());
            if let (Some(c), Some(r)) = (conv, refs) {
                let denom = mean(r);
                ensure!(denom > 0.0, Numeric, "reference score for {} is zero", AccentId(t));
                *cell = RatioCell::Ratio(mean(c) / denom);
            }
        }
    }
    Ok(RatioMatrix {
        accents: (0..n_accents).map(AccentId).collect(),
        cells,
    })
}

/// One converted output to be scored.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvertedItem {
    pub source_id: String,
    pub source_accent: AccentId,
    pub target_accent: AccentId,
    pub speaker: SpeakerId,
    pub mode: Mode,
    pub target_phonemes: Vec<PhonemeId>,
    pub mel: MelSpectrogram,
}

#[derive(Debug, Clone)]
pub struct ProxyClassifiers {
    pub accent: ProxyClassifier,
    pub speaker: ProxyClassifier,
    pub phoneme: ProxyClassifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub modes: Vec<Mode>,
    pub alpha: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            modes: Mode::ALL.to_vec(),
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    PhonemeErrorRate,
    AccentSimilarity,
    SpeakerSimilarity,
}

impl Metric {
    pub const ALL: [Metric; 3] = [
        Metric::PhonemeErrorRate,
        Metric::AccentSimilarity,
        Metric::SpeakerSimilarity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::PhonemeErrorRate => "phoneme_error_rate",
            Metric::AccentSimilarity => "accent_similarity",
            Metric::SpeakerSimilarity => "speaker_similarity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemRow {
    pub mode: Mode,
    /// Items in the paired comparison set.
    pub n_items: usize,
    pub phoneme_error_rate: f64,
    pub accent_similarity: f64,
    pub speaker_similarity: f64,
    /// Share of every converted output of this mode whose speaker-classifier argmax is the source speaker.
    pub speaker_accuracy: f64,
    pub n_all_items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub metric: Metric,
    pub mode_a: Mode,
    pub mode_b: Mode,
    pub mean_a: f64,
    pub mean_b: f64,
    pub p_value: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub alpha: f64,
    pub systems: Vec<SystemRow>,
    pub tests: Vec<PairwiseTest>,
    /// Mean own-accent probability of real test utterances per accent.
    pub reference_accent_scores: BTreeMap<AccentId, f64>,
    /// Ratio matrix of the attention system, if it was evaluated.
    pub ratio_matrix: Option<RatioMatrix>,
    /// The same ratios computed on the unconverted source utterances.
    pub baseline_ratio_matrix: Option<RatioMatrix>,
}

#[derive(Debug, Clone, Copy)]
struct ItemScores {
    per: f64,
    accent: f64,
    speaker: f64,
    speaker_hit: bool,
}

impl ItemScores {
    fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::PhonemeErrorRate => self.per,
            Metric::AccentSimilarity => self.accent,
            Metric::SpeakerSimilarity => self.speaker,
        }
    }
}

fn score_item(item: &ConvertedItem, cls: &ProxyClassifiers) -> Result<ItemScores> {
    let decoded = phoneme_decode(&item.mel, &cls.phoneme)?;
    let speaker_probs = cls.speaker.probabilities(&item.mel)?;
    Ok(ItemScores {
        per: wer(&item.target_phonemes, &decoded)?,
        accent: similarity_score(&item.mel, &cls.accent, item.target_accent.0)?,
        speaker: speaker_probs[[0, item.speaker.0]],
        speaker_hit: argmax(speaker_probs.row(0).iter().copied()) == item.speaker.0,
    })
}

/// Scores converted outputs and compares the systems.
///
/// Tables and t-tests use the pairing set: `(source, target accent)` keys present
/// for every evaluated mode. Speaker accuracy and the ratio matrix use all items.
/// `reference` lists real test utterances used to normalize accent scores.
pub fn evaluate_systems(
    corpus: &Corpus,
    reference: &[usize],
    items: &[ConvertedItem],
    classifiers: &ProxyClassifiers,
    config: &EvalConfig,
) -> Result<EvalReport> {
    ensure!(!items.is_empty(), EmptyInput, "no converted items to evaluate");
    ensure!(!config.modes.is_empty(), Config, "no modes to evaluate");
    ensure!(
        config.alpha > 0.0 && config.alpha < 1.0,
        Config,
        "alpha must lie in (0, 1)"
    );
    let modes: Vec<Mode> = config.modes.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let scores: Vec<ItemScores> = items
        .par_iter()
        .map(|it| score_item(it, classifiers))
        .collect::<Result<_>>()?;

    type Key = (String, AccentId);
    let mut by_mode: BTreeMap<Mode, BTreeMap<Key, usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        if modes.contains(&it.mode) {
            by_mode
                .entry(it.mode)
                .or_default()
                .insert((it.source_id.clone(), it.target_accent), i);
        }
    }
    for m in &modes {
        ensure!(by_mode.contains_key(m), EmptyInput, "no converted items for mode {m}");
    }
    let paired: Vec<Key> = by_mode[&modes[0]]
        .keys()
        .filter(|k| modes.iter().all(|m| by_mode[m].contains_key(*k)))
        .cloned()
        .collect();
    ensure!(!paired.is_empty(), EmptyInput, "no item was converted by every mode");

    let series = |mode: Mode, metric: Metric| -> Vec<f64> {
        paired
            .iter()
            .map(|k| scores[by_mode[&mode][k]].metric(metric))
            .collect()
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    let mut systems = Vec::with_capacity(modes.len());
    for &mode in &modes {
        let all: Vec<usize> = by_mode[&mode].values().copied().collect();
        let hits = all.iter().filter(|&&i| scores[i].speaker_hit).count();
        systems.push(SystemRow {
            mode,
            n_items: paired.len(),
            phoneme_error_rate: mean(&series(mode, Metric::PhonemeErrorRate)),
            accent_similarity: mean(&series(mode, Metric::AccentSimilarity)),
            speaker_similarity: mean(&series(mode, Metric::SpeakerSimilarity)),
            speaker_accuracy: hits as f64 / all.len() as f64,
            n_all_items: all.len(),
        });
    }

    let mut tests = Vec::new();
    if paired.len() >= 2 {
        for metric in Metric::ALL {
            let mut family = Vec::new();
            for (ia, &a) in modes.iter().enumerate() {
                for &b in &modes[ia + 1..] {
                    let (sa, sb) = (series(a, metric), series(b, metric));
                    family.push(PairwiseTest {
                        metric,
                        mode_a: a,
                        mode_b: b,
                        mean_a: mean(&sa),
                        mean_b: mean(&sb),
                        p_value: paired_t_test(&sa, &sb)?,
                        reject: false,
                    });
                }
            }
            let p: Vec<f64> = family.iter().map(|t| t.p_value).collect();
            for (t, r) in family.iter_mut().zip(holm_bonferroni(&p, config.alpha)?) {
                t.reject = r;
            }
            tests.extend(family);
        }
    }

    let n_accents = corpus.accents.len();
    let mut reference_lists: BTreeMap<AccentId, Vec<f64>> = BTreeMap::new();
    let ref_scores: Vec<(AccentId, f64)> = reference
        .par_iter()
        .map(|&i| {
            let u = &corpus.utterances[i];
            Ok((u.accent_id, similarity_score(&u.mel, &classifiers.accent, u.accent_id.0)?))
        })
        .collect::<Result<_>>()?;
    for (a, s) in ref_scores {
        reference_lists.entry(a).or_default().push(s);
    }
    let reference_accent_scores = reference_lists
        .iter()
        .map(|(a, v)| (*a, mean(v)))
        .collect();

    let (ratio_matrix, baseline_ratio_matrix) = if by_mode.contains_key(&Mode::RemapWarpAttend) {
        let mut converted: BTreeMap<(AccentId, AccentId), Vec<f64>> = BTreeMap::new();
        let mut sources: Vec<(usize, &ConvertedItem)> = Vec::new();
        for &i in by_mode[&Mode::RemapWarpAttend].values() {
            let it = &items[i];
            converted
                .entry((it.source_accent, it.target_accent))
                .or_default()
                .push(scores[i].accent);
            sources.push((i, it));
        }
        let baseline_scores: Vec<((AccentId, AccentId), f64)> = sources
            .par_iter()
            .map(|(_, it)| {
                let u = corpus.utterance(&it.source_id)?;
                Ok((
                    (it.source_accent, it.target_accent),
                    similarity_score(&u.mel, &classifiers.accent, it.target_accent.0)?,
                ))
            })
            .collect::<Result<_>>()?;
        let mut baseline: BTreeMap<(AccentId, AccentId), Vec<f64>> = BTreeMap::new();
        for (k, s) in baseline_scores {
            baseline.entry(k).or_default().push(s);
        }
        (
            Some(score_ratio_matrix(n_accents, &converted, &reference_lists)?),
            Some(score_ratio_matrix(n_accents, &baseline, &reference_lists)?),
        )
    } else {
        (None, None)
    };

    Ok(EvalReport {
        alpha: config.alpha,
        systems,
        tests,
        reference_accent_scores,
        ratio_matrix,
        baseline_ratio_matrix,
    })
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format {
        path: "<csv>".into(),
        reason: e.to_string(),
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Format {
        path: "<csv>".into(),
        reason: e.to_string(),
    })?;
    String::from_utf8(bytes).map_err(|e| Error::Format {
        path: "<csv>".into(),
        reason: e.to_string(),
    })
}

impl EvalReport {
    pub fn system(&self, mode: Mode) -> Option<&SystemRow> {
        self.systems.iter().find(|s| s.mode == mode)
    }

    pub fn test(&self, metric: Metric, a: Mode, b: Mode) -> Option<&PairwiseTest> {
        self.tests.iter().find(|t| {
            t.metric == metric && ((t.mode_a == a && t.mode_b == b) || (t.mode_a == b && t.mode_b == a))
        })
    }

    pub fn systems_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "mode",
            "n_items",
            "phoneme_error_rate",
            "accent_similarity",
            "speaker_similarity",
            "speaker_accuracy",
            "n_all_items",
        ])
        .map_err(csv_error)?;
        for s in &self.systems {
            w.write_record([
                s.mode.to_string(),
                s.n_items.to_string(),
                format!("{:.6}", s.phoneme_error_rate),
                format!("{:.6}", s.accent_similarity),
                format!("{:.6}", s.speaker_similarity),
                format!("{:.6}", s.speaker_accuracy),
                s.n_all_items.to_string(),
            ])
            .map_err(csv_error)?;
        }
        finish_csv(w)
    }

    pub fn tests_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "mode_a", "mode_b", "mean_a", "mean_b", "p_value", "reject"])
            .map_err(csv_error)?;
        for t in &self.tests {
            w.write_record([
                t.metric.as_str().to_string(),
                t.mode_a.to_string(),
                t.mode_b.to_string(),
                format!("{:.6}", t.mean_a),
                format!("{:.6}", t.mean_b),
                format!("{:.6e}", t.p_value),
                t.reject.to_string(),
            ])
            .map_err(csv_error)?;
        }
        finish_csv(w)
    }

    /// Human-readable summary of every table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "systems (paired set)");
        let _ = writeln!(
            out,
            "{:<20} {:>6} {:>8} {:>8} {:>8} {:>8}",
            "mode", "n", "PER", "accent", "speaker", "spk_acc"
        );
        for s in &self.systems {
            let _ = writeln!(
                out,
                "{:<20} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                s.mode.as_str(),
                s.n_items,
                s.phoneme_error_rate,
                s.accent_similarity,
                s.speaker_similarity,
                s.speaker_accuracy
            );
        }
        let _ = writeln!(out, "\npaired t-tests, Holm-Bonferroni at alpha = {}", self.alpha);
        for t in &self.tests {
            let _ = writeln!(
                out,
                "{:<20} {:<18} vs {:<18} p = {:.3e} {}",
                t.metric.as_str(),
                t.mode_a.as_str(),
                t.mode_b.as_str(),
                t.p_value,
                if t.reject { "significant" } else { "n.s." }
            );
        }
        for (title, m) in [
            ("ratio matrix (remap_warp_attend)", &self.ratio_matrix),
            ("ratio matrix (unconverted source)", &self.baseline_ratio_matrix),
        ] {
            if let Some(m) = m {
                let _ = writeln!(out, "\n{title}");
                for (a, row) in m.accents.iter().zip(&m.cells) {
                    let cells: Vec<String> = row.iter().map(|c| format!("{:>9}", c.render())).collect();
                    let _ = writeln!(out, "{a:<6} {}", cells.join(" "));
                }
            }
        }
        out
    }

    /// Writes `report.json`, `report.txt` and one CSV per table into `dir`.
    pub fn write(&self, dir: &Path, provenance: &crate::provenance::Provenance) -> Result<()> {
        #[derive(Serialize)]
        struct Wrapped<'a> {
            provenance: &'a crate::provenance::Provenance,
            report: &'a EvalReport,
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::provenance::write_json(
            &dir.join("report.json"),
            &Wrapped {
                provenance,
                report: self,
            },
        )?;
        let header = format!(
            "format_version {} config_hash {} seed {}\n\n",
            provenance.format_version, provenance.config_hash, provenance.seed
        );
        let mut files = vec![
            ("report.txt", header + &self.to_text()),
            ("systems.csv", self.systems_csv()?),
            ("pairwise_tests.csv", self.tests_csv()?),
        ];
        if let Some(m) = &self.ratio_matrix {
            files.push(("ratio_matrix.csv", m.to_csv()?));
        }
        if let Some(m) = &self.baseline_ratio_matrix {
            files.push(("baseline_ratio_matrix.csv", m.to_csv()?));
        }
        for (name, text) in files {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&["a", "b", "c"], &["a", "b", "c"]).unwrap(), 0.0);
        assert_eq!(wer(&["a", "b", "c", "d"], &["a", "x", "c", "d"]).unwrap(), 0.25);
        assert_eq!(wer(&["a", "b"], &["a", "b", "c"]).unwrap(), 0.5);
        assert_eq!(wer(&["a"], &["b", "c", "d"]).unwrap(), 3.0);
        assert!(matches!(wer::<&str>(&[], &["a"]), Err(Error::Contract(_))));
    }

    #[test]
    fn run_collapse() {
        assert_eq!(collapse_runs(&[1, 1, 2, 2, 1]), vec![1, 2, 1]);
        assert!(collapse_runs::<u8>(&[]).is_empty());
    }

    #[test]
    fn t_test_conventions_and_reference() {
        assert_eq!(paired_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert!(matches!(
            paired_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(paired_t_test(&[1.0], &[2.0]), Err(Error::Contract(_))));
        assert!(matches!(paired_t_test(&[1.0, 2.0], &[2.0]), Err(Error::Contract(_))));
        // scipy.stats.ttest_rel
        let p = paired_t_test(&[1.1, 2.0, 2.9, 4.2], &[1.0, 2.1, 3.1, 4.0]).unwrap();
        assert!((p - 1.0).abs() < 1e-6, "{p}");
        let p = paired_t_test(
            &[0.3, 0.9, 0.4, 0.8, 0.75, 0.2],
            &[0.1, 0.5, 0.6, 0.2, 0.3, 0.15],
        )
        .unwrap();
        assert!((p - 0.091_111_046_135_107_77).abs() < 1e-6, "{p}");
    }

    #[test]
    fn holm_examples() {
        assert_eq!(holm_bonferroni(&[0.01], 0.05).unwrap(), vec![true]);
        assert_eq!(holm_bonferroni(&[0.01, 0.04], 0.05).unwrap(), vec![true, true]);
        assert_eq!(holm_bonferroni(&[0.03, 0.04], 0.05).unwrap(), vec![false, false]);
        assert_eq!(holm_bonferroni(&[0.04, 0.01], 0.05).unwrap(), vec![true, true]);
        assert!(holm_bonferroni(&[], 0.05).unwrap().is_empty());
        assert!(matches!(holm_bonferroni(&[1.2], 0.05), Err(Error::Contract(_))));
        assert!(matches!(holm_bonferroni(&[0.2], 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn ratio_matrix_cells() {
        let mut conv = BTreeMap::new();
        conv.insert((AccentId(0), AccentId(1)), vec![0.4, 0.6]);
        conv.insert((AccentId(1), AccentId(0)), vec![]);
        let mut refs = BTreeMap::new();
        refs.insert(AccentId(0), vec![0.8]);
        refs.insert(AccentId(1), vec![0.5]);
        let m = score_ratio_matrix(2, &conv, &refs).unwrap();
        assert_eq!(m.get(AccentId(0), AccentId(0)), RatioCell::Absent);
        assert_eq!(m.get(AccentId(1), AccentId(1)), RatioCell::Absent);
        assert_eq!(m.get(AccentId(0), AccentId(1)), RatioCell::Ratio(1.0));
        assert_eq!(m.get(AccentId(1), AccentId(0)), RatioCell::Missing);
        assert!(m.to_csv().unwrap().contains("missing"));
    }
}
