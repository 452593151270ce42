//! Fixtures shared by the benchmarks: a small corpus and untrained models sized
//! like the default configuration.

use flowconvert_core::nn::gaussian;
use flowconvert_core::rng::seeded;
use flowconvert_core::{
    generate_corpus, AttentionBlock, AttentionConfig, Corpus, CorpusConfig, FeatureConfig,
    FeatureStack, FlowConfig, FlowModel, FrameConditioning, MelSpectrogram,
};
use ndarray::Array2;

pub struct Fixture {
    pub corpus: Corpus,
    pub features: FeatureStack,
    pub flow: FlowModel,
    pub attention: AttentionBlock,
}

impl Fixture {
    pub fn new() -> Self {
        let corpus = generate_corpus(
            &CorpusConfig {
                utterances_per_speaker: 4,
                ..CorpusConfig::default()
            },
            7,
        )
        .expect("default-sized corpus");
        let c = &corpus.config;
        let mut rng = seeded(1);
        let features = FeatureStack::new(&FeatureConfig::default(), c.n_phonemes, c.n_speakers, c.n_accents, &mut rng);
        let mut flow = FlowModel::new(&FlowConfig::default(), c.dim, features.cond_dim(), &mut rng);
        flow.perturb(&mut rng, 0.05);
        let attention = AttentionBlock::new(&AttentionConfig::default(), c.dim, features.cond_dim(), &mut rng);
        Self {
            corpus,
            features,
            flow,
            attention,
        }
    }

    /// Random mel frames and conditioning of length `t`.
    pub fn frames(&self, t: usize) -> (MelSpectrogram, FrameConditioning) {
        let mut rng = seeded(t as u64);
        let x = gaussian(&mut rng, (t, self.corpus.dim()), 1.0);
        let cond: Array2<f64> = gaussian(&mut rng, (t, self.features.cond_dim()), 1.0);
        (
            MelSpectrogram::new(x).expect("finite"),
            FrameConditioning::new(cond).expect("finite"),
        )
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Self::new()
    }
}
