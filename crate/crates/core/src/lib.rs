//! Accent conversion with a conditional normalizing flow.
//!
//! A flow maps mel frames to latents under phoneme, speaker and accent
//! conditioning. Converting re-decodes the latents under target-accent phonemes,
//! optionally after time-warping them to predicted target durations or realigning
//! them with a denoising attention block. Everything runs on a seeded synthetic
//! multi-accent corpus and is scored by proxy classifiers.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod duration;
pub mod error;
pub mod eval;
pub mod features;
pub mod flow;
pub mod nn;
pub mod pipeline;
pub mod provenance;
pub mod rng;
pub mod syncorpus;

pub use attention::{AttentionBlock, AttentionConfig};
pub use checkpoint::{Checkpoint, Stage};
pub use duration::{DurationModel, WarpMatrix};
pub use error::{Error, Result};
pub use eval::{EvalConfig, EvalReport, ProxyClassifier, ProxyClassifiers};
pub use features::{FeatureConfig, FeatureStack, FrameConditioning};
pub use flow::{FlowConfig, FlowModel, LatentSequence};
pub use nn::TrainConfig;
pub use pipeline::{ConversionModels, ConversionRequest, ConversionResult, Mode};
pub use provenance::Provenance;
pub use syncorpus::{
    generate_corpus, AccentId, Corpus, CorpusConfig, MelSpectrogram, PhonemeId, PhonemeSequence,
    SpeakerId, Utterance,
};
