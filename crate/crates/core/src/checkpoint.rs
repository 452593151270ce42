//! Per-stage checkpoint files: named tensor groups plus provenance and summary metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LossCurve, Params, TensorRecord};
use crate::provenance::{read_json, write_json, Provenance, FORMAT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Flow,
    Duration,
    Attention,
    Classifiers,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Flow, Stage::Duration, Stage::Attention, Stage::Classifiers];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Flow => "flow",
            Stage::Duration => "duration",
            Stage::Attention => "attention",
            Stage::Classifiers => "classifiers",
        }
    }

    /// Stages whose checkpoints must exist before this one can train.
    pub fn dependencies(self) -> &'static [Stage] {
        match self {
            Stage::Attention => &[Stage::Flow],
            _ => &[],
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.json", self.as_str())
    }

    pub fn path(self, dir: &Path) -> PathBuf {
        dir.join(self.file_name())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub provenance: Provenance,
    pub stage: Stage,
    pub steps: usize,
    pub dims: BTreeMap<String, usize>,
    pub metrics: BTreeMap<String, f64>,
    pub groups: BTreeMap<String, Vec<TensorRecord>>,
}

impl Checkpoint {
    pub fn new(stage: Stage, provenance: Provenance, steps: usize) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            provenance,
            stage,
            steps,
            dims: BTreeMap::new(),
            metrics: BTreeMap::new(),
            groups: BTreeMap::new(),
        }
    }

    pub fn with_dim(mut self, name: &str, value: usize) -> Self {
        self.dims.insert(name.to_string(), value);
        self
    }

    pub fn with_metric(mut self, name: &str, value: f64) -> Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    pub fn with_group(mut self, name: &str, params: &Params) -> Self {
        self.groups.insert(name.to_string(), params.to_records());
        self
    }

    pub fn dim(&self, name: &str) -> Result<usize> {
        self.dims
            .get(name)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("{} checkpoint has no dimension {name:?}", self.stage)))
    }

    /// Overwrites `params` from the named group.
    pub fn restore(&self, name: &str, params: &mut Params) -> Result<()> {
        let records = self
            .groups
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("{} checkpoint has no tensor group {name:?}", self.stage)))?;
        params.load_records(records)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = self.stage.path(dir);
        write_json(&path, self)?;
        Ok(path)
    }

    /// Loads the `stage` checkpoint from `dir`; a missing file is an ordering error.
    pub fn load(dir: &Path, stage: Stage) -> Result<Self> {
        let path = stage.path(dir);
        if !path.exists() {
            return Err(Error::Ordering(format!(
                "no {stage} checkpoint in {}; run `train --stage {stage}` first",
                dir.display()
            )));
        }
        let ckpt: Checkpoint = read_json(&path)?;
        if ckpt.format_version != FORMAT_VERSION || ckpt.stage != stage {
            return Err(Error::Format {
                path,
                reason: format!(
                    "expected a version {FORMAT_VERSION} {stage} checkpoint, found version {} {}",
                    ckpt.format_version, ckpt.stage
                ),
            });
        }
        Ok(ckpt)
    }
}

/// Writes a loss curve as `step,loss` rows.
pub fn write_loss_csv(path: &Path, curve: &LossCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let fail = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    w.write_record(["step", "loss"]).map_err(fail)?;
    for (step, loss) in curve.steps.iter().zip(&curve.losses) {
        w.write_record([step.to_string(), format!("{loss:.8}")]).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn roundtrip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = Params::new();
        params.add("w", array![[1.0, 2.0], [3.0, 0.1 + 0.2]]);
        let ckpt = Checkpoint::new(Stage::Duration, Provenance::new("abc", 3), 10)
            .with_dim("n", 2)
            .with_metric("mae", 0.5)
            .with_group("duration", &params);
        ckpt.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path(), Stage::Duration).unwrap();
        assert_eq!(back, ckpt);
        let mut other = Params::new();
        other.add("w", array![[0.0, 0.0], [0.0, 0.0]]);
        back.restore("duration", &mut other).unwrap();
        assert_eq!(other.values()[0], params.values()[0]);
        assert!(matches!(
            Checkpoint::load(dir.path(), Stage::Flow),
            Err(Error::Ordering(_))
        ));
        assert!(matches!(back.restore("flow", &mut other), Err(Error::Lookup(_))));
    }

    #[test]
    fn stage_names() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
        assert_eq!(Stage::Attention.dependencies(), &[Stage::Flow]);
        assert!("vocoder".parse::<Stage>().is_err());
    }
}
