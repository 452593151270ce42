#![allow(dead_code)]

use flowconvert_core::rng::seeded;
use flowconvert_core::{
    generate_corpus, AttentionBlock, AttentionConfig, ConversionModels, Corpus, CorpusConfig,
    DurationModel, FeatureConfig, FeatureStack, FlowConfig, FlowModel,
};

pub fn small_config() -> CorpusConfig {
    CorpusConfig {
        n_accents: 3,
        n_speakers: 3,
        n_words: 40,
        n_phonemes: 16,
        utterances_per_speaker: 6,
        dim: 4,
        contrast_pairs: 2,
        substitutions_per_accent: 6,
        ..CorpusConfig::default()
    }
}

pub fn small_corpus(seed: u64) -> Corpus {
    generate_corpus(&small_config(), seed).expect("small corpus")
}

/// Untrained but generic models: perturbed flow, random encoder and attention.
pub fn generic_models(corpus: &Corpus, seed: u64) -> ConversionModels {
    let c = &corpus.config;
    let mut rng = seeded(seed);
    let features = FeatureStack::new(&FeatureConfig::default(), c.n_phonemes, c.n_speakers, c.n_accents, &mut rng);
    let mut flow = FlowModel::new(&FlowConfig { steps: 4, hidden: 16, ..FlowConfig::default() }, c.dim, features.cond_dim(), &mut rng);
    flow.perturb(&mut rng, 0.05);
    let duration = DurationModel::new(&FeatureConfig::default(), c.n_phonemes, c.n_accents, &mut rng);
    let attention = AttentionBlock::new(&AttentionConfig::default(), c.dim, features.cond_dim(), &mut rng);
    ConversionModels { features, flow, duration, attention }
}

pub fn max_abs_diff(a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
