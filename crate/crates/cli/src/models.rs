//! Building, training and restoring every stage's models from the run configuration.

use std::path::Path;

use flowconvert_core::attention::{denoising_examples, denoising_score, train_attention};
use flowconvert_core::checkpoint::write_loss_csv;
use flowconvert_core::duration::{duration_mae, train_duration_model};
use flowconvert_core::eval::{classifier_accuracy, train_classifier, ClassifierKind};
use flowconvert_core::flow::train_flow;
use flowconvert_core::rng::{derive_seed, stream};
use flowconvert_core::syncorpus::CorpusSplit;
use flowconvert_core::{
    AttentionBlock, Checkpoint, ConversionModels, Corpus, DurationModel, FeatureStack, FlowModel,
    ProxyClassifier, ProxyClassifiers, Result, Stage,
};

use crate::config::RunConfig;

fn init_rng(cfg: &RunConfig, what: &str) -> flowconvert_core::rng::Rng {
    stream(cfg.seed, &format!("init-{what}"), 0)
}

fn train_seed(cfg: &RunConfig, stage: Stage) -> u64 {
    derive_seed(cfg.seed, &format!("train-{stage}"), 0)
}

pub fn split(cfg: &RunConfig, corpus: &Corpus) -> Result<CorpusSplit> {
    corpus.split(cfg.eval.model_fraction, cfg.eval.classifier_fraction)
}

fn new_features(cfg: &RunConfig, corpus: &Corpus) -> FeatureStack {
    let c = &corpus.config;
    FeatureStack::new(&cfg.features, c.n_phonemes, c.n_speakers, c.n_accents, &mut init_rng(cfg, "features"))
}

fn new_flow(cfg: &RunConfig, corpus: &Corpus, features: &FeatureStack) -> FlowModel {
    FlowModel::new(&cfg.flow, corpus.dim(), features.cond_dim(), &mut init_rng(cfg, "flow"))
}

fn new_duration(cfg: &RunConfig, corpus: &Corpus) -> DurationModel {
    let c = &corpus.config;
    DurationModel::new(&cfg.features, c.n_phonemes, c.n_accents, &mut init_rng(cfg, "duration"))
}

fn new_attention(cfg: &RunConfig, corpus: &Corpus, features: &FeatureStack) -> AttentionBlock {
    AttentionBlock::new(&cfg.attention, corpus.dim(), features.cond_dim(), &mut init_rng(cfg, "attention"))
}

fn new_classifiers(cfg: &RunConfig, corpus: &Corpus) -> ProxyClassifiers {
    let c = &corpus.config;
    let mut rng = init_rng(cfg, "classifiers");
    let mut make = |kind, n| ProxyClassifier::new(kind, n, c.dim, &cfg.classifiers, &mut rng);
    ProxyClassifiers {
        accent: make(ClassifierKind::Accent, c.n_accents),
        speaker: make(ClassifierKind::Speaker, c.n_speakers),
        phoneme: make(ClassifierKind::Phoneme, c.n_phonemes),
    }
}

fn loaded(cfg: &RunConfig, dir: &Path, stage: Stage) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(dir, stage)?;
    cfg.check_provenance(&format!("{stage} checkpoint"), &ckpt.provenance)?;
    Ok(ckpt)
}

pub fn load_flow(cfg: &RunConfig, corpus: &Corpus, dir: &Path) -> Result<(FeatureStack, FlowModel)> {
    let ckpt = loaded(cfg, dir, Stage::Flow)?;
    let mut features = new_features(cfg, corpus);
    let mut flow = new_flow(cfg, corpus, &features);
    ckpt.restore("features", &mut features.params)?;
    ckpt.restore("flow", &mut flow.params)?;
    flow.actnorm_initialized = true;
    Ok((features, flow))
}

pub fn load_duration(cfg: &RunConfig, corpus: &Corpus, dir: &Path) -> Result<DurationModel> {
    let ckpt = loaded(cfg, dir, Stage::Duration)?;
    let mut model = new_duration(cfg, corpus);
    ckpt.restore("duration", &mut model.params)?;
    Ok(model)
}

pub fn load_attention(cfg: &RunConfig, corpus: &Corpus, features: &FeatureStack, dir: &Path) -> Result<AttentionBlock> {
    let ckpt = loaded(cfg, dir, Stage::Attention)?;
    let mut block = new_attention(cfg, corpus, features);
    ckpt.restore("attention", &mut block.params)?;
    Ok(block)
}

pub fn load_models(cfg: &RunConfig, corpus: &Corpus, dir: &Path) -> Result<ConversionModels> {
    let (features, flow) = load_flow(cfg, corpus, dir)?;
    let duration = load_duration(cfg, corpus, dir)?;
    let attention = load_attention(cfg, corpus, &features, dir)?;
    Ok(ConversionModels {
        features,
        flow,
        duration,
        attention,
    })
}

pub fn load_classifiers(cfg: &RunConfig, corpus: &Corpus, dir: &Path) -> Result<ProxyClassifiers> {
    let ckpt = loaded(cfg, dir, Stage::Classifiers)?;
    let mut cls = new_classifiers(cfg, corpus);
    for c in [&mut cls.accent, &mut cls.speaker, &mut cls.phoneme] {
        ckpt.restore(c.kind.as_str(), &mut c.params)?;
        c.trained = true;
    }
    Ok(cls)
}

/// Trains one stage, writes its checkpoint and loss curve(s) into `out`.
pub fn train_stage(cfg: &RunConfig, corpus: &Corpus, out: &Path, stage: Stage) -> Result<Checkpoint> {
    for &dep in stage.dependencies() {
        loaded(cfg, out, dep)?;
    }
    let split = split(cfg, corpus)?;
    let seed = train_seed(cfg, stage);
    let prov = cfg.provenance();
    let ckpt = match stage {
        Stage::Flow => {
            let mut features = new_features(cfg, corpus);
            let mut flow = new_flow(cfg, corpus, &features);
            let t = &cfg.training.flow;
            let log = train_flow(&mut features, &mut flow, corpus, &split.model, &split.test, t, seed)?;
            write_loss_csv(&out.join("flow_loss.csv"), &log.curve)?;
            Checkpoint::new(stage, prov, t.steps)
                .with_dim("data_dim", flow.data_dim)
                .with_dim("cond_dim", flow.cond_dim)
                .with_dim("flow_steps", cfg.flow.steps)
                .with_metric("initial_nll", log.initial_nll)
                .with_metric("final_nll", log.final_nll)
                .with_group("features", &features.params)
                .with_group("flow", &flow.params)
        }
        Stage::Duration => {
            let mut model = new_duration(cfg, corpus);
            let t = &cfg.training.duration;
            let curve = train_duration_model(&mut model, corpus, &split.model, t, seed)?;
            write_loss_csv(&out.join("duration_loss.csv"), &curve)?;
            let (mae, mean) = duration_mae(&model, corpus, &split.test)?;
            Checkpoint::new(stage, prov, t.steps)
                .with_dim("n_phonemes", corpus.config.n_phonemes)
                .with_dim("n_accents", corpus.config.n_accents)
                .with_metric("test_mae", mae)
                .with_metric("test_mean_duration", mean)
                .with_group("duration", &model.params)
        }
        Stage::Attention => {
            let (features, flow) = load_flow(cfg, corpus, out)?;
            let mut block = new_attention(cfg, corpus, &features);
            let n_freq = cfg.attention.n_frequencies;
            let train = denoising_examples(corpus, &features, &flow, n_freq, &split.model)?;
            let t = &cfg.training.attention;
            let log = train_attention(&mut block, &train, t, seed)?;
            write_loss_csv(&out.join("attention_loss.csv"), &log.curve)?;
            let held_out = denoising_examples(corpus, &features, &flow, n_freq, &split.test)?;
            let score = denoising_score(&block, &held_out, cfg.attention.dropout_rate, derive_seed(seed, "score", 0))?;
            Checkpoint::new(stage, prov, t.steps)
                .with_dim("data_dim", block.data_dim)
                .with_dim("cond_dim", block.cond_dim)
                .with_dim("n_heads", cfg.attention.n_heads)
                .with_metric("test_attended_mse", score.attended_mse)
                .with_metric("test_corrupted_mse", score.corrupted_mse)
                .with_metric("test_mean_entropy", score.mean_entropy)
                .with_metric("final_train_entropy", log.final_entropy)
                .with_group("attention", &block.params)
        }
        Stage::Classifiers => {
            let mut cls = new_classifiers(cfg, corpus);
            let t = &cfg.training.classifiers;
            let mut ckpt = Checkpoint::new(stage, prov, t.steps).with_dim("data_dim", corpus.dim());
            for c in [&mut cls.accent, &mut cls.speaker, &mut cls.phoneme] {
                let kind = c.kind.as_str();
                let curve = train_classifier(c, corpus, &split.classifier, t, derive_seed(seed, kind, 0))?;
                write_loss_csv(&out.join(format!("classifier_{kind}_loss.csv")), &curve)?;
                let acc = classifier_accuracy(c, corpus, &split.test)?;
                ckpt = ckpt
                    .with_dim(&format!("{kind}_labels"), c.n_labels)
                    .with_metric(&format!("{kind}_test_accuracy"), acc)
                    .with_group(kind, &c.params);
            }
            ckpt
        }
    };
    ckpt.save(out)?;
    Ok(ckpt)
}
