//! The single run configuration file and its provenance hash.

use std::path::Path;

use flowconvert_core::eval::ClassifierConfig;
use flowconvert_core::provenance::sha256_hex;
use flowconvert_core::{
    AttentionConfig, CorpusConfig, Error, EvalConfig, FeatureConfig, FlowConfig, Mode, Provenance,
    Result, TrainConfig,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub flow: TrainConfig,
    pub duration: TrainConfig,
    pub attention: TrainConfig,
    pub classifiers: TrainConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let steps = |steps| TrainConfig {
            steps,
            ..TrainConfig::default()
        };
        Self {
            flow: steps(2000),
            duration: steps(1000),
            attention: steps(1000),
            classifiers: steps(1500),
        }
    }
}

/// Split fractions plus the evaluated modes and significance level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub model_fraction: f64,
    pub classifier_fraction: f64,
    pub modes: Vec<Mode>,
    pub alpha: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let eval = EvalConfig::default();
        Self {
            model_fraction: 0.5,
            classifier_fraction: 0.3,
            modes: eval.modes,
            alpha: eval.alpha,
        }
    }
}

impl EvalSection {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            modes: self.modes.clone(),
            alpha: self.alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub features: FeatureConfig,
    pub flow: FlowConfig,
    pub attention: AttentionConfig,
    pub classifiers: ClassifierConfig,
    pub training: TrainingConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            corpus: CorpusConfig::default(),
            features: FeatureConfig::default(),
            flow: FlowConfig::default(),
            attention: AttentionConfig::default(),
            classifiers: ClassifierConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Defaults when `path` is absent; `seed` overrides the file.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_path(p)?,
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        let e = &self.eval;
        if !(e.model_fraction > 0.0
            && e.classifier_fraction > 0.0
            && e.model_fraction + e.classifier_fraction < 1.0)
        {
            return Err(Error::Config(
                "eval split fractions must be positive and leave room for a test set".into(),
            ));
        }
        if e.modes.is_empty() {
            return Err(Error::Config("eval.modes must name at least one mode".into()));
        }
        if !(e.alpha > 0.0 && e.alpha < 1.0) {
            return Err(Error::Config("eval.alpha must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.attention.dropout_rate) {
            return Err(Error::Config("attention.dropout_rate must lie in [0, 1)".into()));
        }
        if self.flow.steps == 0 || self.flow.hidden == 0 {
            return Err(Error::Config("flow needs at least one step and hidden unit".into()));
        }
        for (name, t) in [
            ("flow", &self.training.flow),
            ("duration", &self.training.duration),
            ("attention", &self.training.attention),
            ("classifiers", &self.training.classifiers),
        ] {
            if t.batch_size == 0 || t.learning_rate.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                return Err(Error::Config(format!(
                    "training.{name} needs a positive batch size and learning rate"
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(self.hash(), self.seed)
    }

    /// Errors unless `found` was produced under this configuration.
    pub fn check_provenance(&self, what: &str, found: &Provenance) -> Result<()> {
        let expected = self.provenance();
        if *found != expected {
            return Err(Error::Config(format!(
                "{what} was produced under config {} (seed {}, format {}), but the current config is {} (seed {}, format {})",
                short(&found.config_hash),
                found.seed,
                found.format_version,
                short(&expected.config_hash),
                expected.seed,
                expected.format_version
            )));
        }
        Ok(())
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml("seed = 3\n[training.flow]\nsteps = 10\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.training.flow.steps, 10);
        assert_eq!(cfg.training.duration, RunConfig::default().training.duration);
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.training.attention.learning_rate *= 2.0;
        assert_ne!(a.hash(), b.hash());
        let c = RunConfig::resolve(None, Some(8)).unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn bad_files_are_config_errors() {
        for text in [
            "seed = \"x\"",
            "[corpus]\nunknown = 1",
            "[corpus]\nn_accents = 1",
            "[eval]\nmodes = []",
            "[eval]\nalpha = 1.5",
            "[eval]\nmodes = [\"warp\"]",
        ] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }
}
