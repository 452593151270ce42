//! The `flowconvert` subcommands as library functions.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use flowconvert_core::eval::{evaluate_systems, ConvertedItem};
use flowconvert_core::pipeline::convert;
use flowconvert_core::provenance::{read_json, write_json, FORMAT_VERSION};
use flowconvert_core::syncorpus::ArrayFile;
use flowconvert_core::{
    generate_corpus, AccentId, Checkpoint, ConversionModels, ConversionRequest, Corpus, Error,
    EvalReport, Mode, Provenance, Result, Stage,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::models::{load_classifiers, load_models, split, train_stage};

fn remove_if_present(path: &Path) -> Result<()> {
    let result = if path.is_dir() {
        fs::remove_dir_all(path)
    } else if path.exists() {
        fs::remove_file(path)
    } else {
        return Ok(());
    };
    result.map_err(|e| Error::io(path, e))
}

fn is_nonempty_dir(path: &Path) -> Result<bool> {
    if !path.exists() {
        return Ok(false);
    }
    let mut entries = fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    Ok(entries.next().is_some())
}

/// Loads a corpus written by [`gen_data`] and checks it belongs to this configuration.
pub fn load_corpus(cfg: &RunConfig, dir: &Path) -> Result<Corpus> {
    if !dir.join("manifest.json").exists() {
        return Err(Error::Ordering(format!(
            "no corpus in {}; run `gen-data` first",
            dir.display()
        )));
    }
    let (corpus, prov) = Corpus::load(dir)?;
    cfg.check_provenance("corpus", &prov)?;
    Ok(corpus)
}

/// Generates the corpus into `out`, refusing to replace an existing one unless `force`.
pub fn gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<Corpus> {
    if is_nonempty_dir(out)? {
        if !force {
            return Err(Error::Config(format!(
                "{} already exists and is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        remove_if_present(&out.join("manifest.json"))?;
        remove_if_present(&out.join("utterances"))?;
    }
    let corpus = generate_corpus(&cfg.corpus, cfg.seed)?;
    corpus.save(out, &cfg.provenance())?;
    log::info!(
        "wrote {} utterances from {} speakers in {} accents to {}",
        corpus.utterances.len(),
        corpus.speakers.len(),
        corpus.accents.len(),
        out.display()
    );
    Ok(corpus)
}

/// Which stages `--stage` names; `all` expands in dependency order.
pub fn parse_stages(name: &str) -> Result<Vec<Stage>> {
    if name == "all" {
        Ok(Stage::ALL.to_vec())
    } else {
        Ok(vec![name.parse()?])
    }
}

pub fn train(cfg: &RunConfig, corpus_dir: &Path, out: &Path, stages: &[Stage]) -> Result<Vec<Checkpoint>> {
    let corpus = load_corpus(cfg, corpus_dir)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut done = Vec::with_capacity(stages.len());
    for &stage in stages {
        log::info!("training stage {stage}");
        let ckpt = train_stage(cfg, &corpus, out, stage)?;
        for (name, value) in &ckpt.metrics {
            log::info!("{stage} {name} = {value:.6}");
        }
        done.push(ckpt);
    }
    Ok(done)
}

/// One row of a request manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestRow {
    pub utterance: String,
    pub target_accent: String,
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub durations: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestManifest {
    #[serde(default)]
    pub request: Vec<RequestRow>,
}

impl RequestManifest {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Every held-out test utterance into every other accent, once per configured mode.
    pub fn default_for(cfg: &RunConfig, corpus: &Corpus) -> Result<Self> {
        let split = split(cfg, corpus)?;
        let mut request = Vec::new();
        for &i in &split.test {
            let u = &corpus.utterances[i];
            for a in 0..corpus.accents.len() {
                if a == u.accent_id.0 {
                    continue;
                }
                for mode in &cfg.eval.modes {
                    request.push(RequestRow {
                        utterance: u.utterance_id.clone(),
                        target_accent: AccentId(a).to_string(),
                        mode: mode.to_string(),
                        durations: None,
                    });
                }
            }
        }
        Ok(Self { request })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertedRow {
    pub row: usize,
    pub id: String,
    pub utterance: String,
    pub target_accent: String,
    pub mode: String,
    pub status: RowStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub diagnostics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertedManifest {
    pub format_version: u32,
    pub provenance: Provenance,
    pub rows: Vec<ConvertedRow>,
}

impl ConvertedManifest {
    pub fn ok_rows(&self) -> impl Iterator<Item = &ConvertedRow> {
        self.rows.iter().filter(|r| r.status == RowStatus::Ok)
    }
}

fn output_id(row: &RequestRow) -> String {
    format!("{}_to_{}_{}", row.utterance, row.target_accent, row.mode)
}

fn convert_row(
    row: &RequestRow,
    corpus: &Corpus,
    models: &ConversionModels,
    out: &Path,
    prov: &Provenance,
) -> Result<(String, BTreeMap<String, f64>)> {
    let utterance = corpus.utterance(&row.utterance)?;
    let target: AccentId = row.target_accent.parse()?;
    corpus.accent(target)?;
    let mode: Mode = row.mode.parse()?;
    let mut req = ConversionRequest::new(utterance, target, mode)?;
    if let Some(d) = &row.durations {
        req = req.with_target_durations(d.clone());
    }
    let result = convert(&req, models, &corpus.accents)?;
    let id = output_id(row);
    let file = format!("mels/{id}.json");
    write_json(
        &out.join(&file),
        &ArrayFile::from_parts(&id, &result.target_phoneme_seq, &result.mel, prov),
    )?;
    Ok((file, result.diagnostics))
}

/// Converts every manifest row; a failing row is recorded and the rest still run.
pub fn convert_requests(
    cfg: &RunConfig,
    checkpoint_dir: &Path,
    corpus_dir: &Path,
    requests: &RequestManifest,
    out: &Path,
) -> Result<ConvertedManifest> {
    if requests.request.is_empty() {
        return Err(Error::EmptyInput("the request manifest has no rows".into()));
    }
    let corpus = load_corpus(cfg, corpus_dir)?;
    let models = load_models(cfg, &corpus, checkpoint_dir)?;
    remove_if_present(&out.join("manifest.json"))?;
    remove_if_present(&out.join("mels"))?;
    fs::create_dir_all(out.join("mels")).map_err(|e| Error::io(out, e))?;
    let prov = cfg.provenance();
    let mut seen = BTreeMap::new();
    for (i, row) in requests.request.iter().enumerate() {
        seen.entry(output_id(row)).or_insert(i);
    }
    let rows: Vec<ConvertedRow> = requests
        .request
        .par_iter()
        .enumerate()
        .map(|(i, row)| {
            let id = output_id(row);
            let outcome = if seen[&id] != i {
                Err(Error::Contract(format!("duplicate of row {}", seen[&id])))
            } else {
                convert_row(row, &corpus, &models, out, &prov)
            };
            let (status, file, error, diagnostics) = match outcome {
                Ok((file, diag)) => (RowStatus::Ok, Some(file), None, diag),
                Err(e) => (RowStatus::Error, None, Some(e.to_string()), BTreeMap::new()),
            };
            ConvertedRow {
                row: i,
                id,
                utterance: row.utterance.clone(),
                target_accent: row.target_accent.clone(),
                mode: row.mode.clone(),
                status,
                file,
                error,
                diagnostics,
            }
        })
        .collect();
    for r in rows.iter().filter(|r| r.status == RowStatus::Error) {
        log::warn!("row {} ({}): {}", r.row, r.id, r.error.as_deref().unwrap_or(""));
    }
    let manifest = ConvertedManifest {
        format_version: FORMAT_VERSION,
        provenance: prov,
        rows,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Reads converted outputs back as evaluation items.
pub fn load_converted(cfg: &RunConfig, corpus: &Corpus, dir: &Path) -> Result<Vec<ConvertedItem>> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::EmptyInput(format!("no converted outputs in {}", dir.display())));
    }
    let manifest: ConvertedManifest = read_json(&path)?;
    cfg.check_provenance("converted outputs", &manifest.provenance)?;
    let rows: Vec<&ConvertedRow> = manifest.ok_rows().collect();
    if rows.is_empty() {
        return Err(Error::EmptyInput(format!(
            "{} lists no successful conversions",
            path.display()
        )));
    }
    rows.par_iter()
        .map(|row| {
            let file_path = dir.join(row.file.as_deref().unwrap_or_default());
            let file: ArrayFile = read_json(&file_path)?;
            cfg.check_provenance(&file_path.display().to_string(), &file.provenance)?;
            let (seq, mel) = file.into_parts(&file_path)?;
            let source = corpus.utterance(&row.utterance)?;
            Ok(ConvertedItem {
                source_id: row.utterance.clone(),
                source_accent: source.accent_id,
                target_accent: row.target_accent.parse()?,
                speaker: source.speaker_id,
                mode: row.mode.parse()?,
                target_phonemes: seq.phonemes().to_vec(),
                mel,
            })
        })
        .collect()
}

pub fn evaluate(
    cfg: &RunConfig,
    checkpoint_dir: &Path,
    corpus_dir: &Path,
    converted_dir: &Path,
    out: &Path,
) -> Result<EvalReport> {
    let corpus = load_corpus(cfg, corpus_dir)?;
    let items = load_converted(cfg, &corpus, converted_dir)?;
    let classifiers = load_classifiers(cfg, &corpus, checkpoint_dir)?;
    let test = split(cfg, &corpus)?.test;
    let report = evaluate_systems(&corpus, &test, &items, &classifiers, &cfg.eval.eval_config())?;
    report.write(out, &cfg.provenance())?;
    Ok(report)
}

/// Provenance found across a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckSummary {
    pub files: usize,
    pub provenance: Provenance,
}

fn json_files(root: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    if root.is_file() {
        if root.extension().is_some_and(|e| e == "json") {
            found.push(root.to_path_buf());
        }
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(root, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for entry in entries {
        json_files(&entry, found)?;
    }
    Ok(())
}

/// Verifies every JSON artifact under `paths` carries the same, current provenance.
pub fn check(paths: &[PathBuf]) -> Result<CheckSummary> {
    let mut files = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(Error::Lookup(format!("{} does not exist", p.display())));
        }
        json_files(p, &mut files)?;
    }
    if files.is_empty() {
        return Err(Error::EmptyInput("no JSON artifacts to check".into()));
    }
    let stamps: Vec<(PathBuf, Option<Provenance>)> = files
        .par_iter()
        .map(|path| {
            let value: serde_json::Value = read_json(path)?;
            let prov = value
                .get("provenance")
                .and_then(|p| serde_json::from_value::<Provenance>(p.clone()).ok());
            Ok((path.clone(), prov))
        })
        .collect::<Result<_>>()?;
    let mut problems = Vec::new();
    let mut reference: Option<&Provenance> = None;
    for (path, prov) in &stamps {
        match prov {
            None => problems.push(format!("{}: no provenance stamp", path.display())),
            Some(p) if p.format_version != FORMAT_VERSION => problems.push(format!(
                "{}: format version {} (expected {FORMAT_VERSION})",
                path.display(),
                p.format_version
            )),
            Some(p) => match reference {
                None => reference = Some(p),
                Some(r) if r != p => problems.push(format!(
                    "{}: config {} seed {} differs from config {} seed {}",
                    path.display(),
                    p.config_hash,
                    p.seed,
                    r.config_hash,
                    r.seed
                )),
                Some(_) => {}
            },
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(format!(
            "provenance check failed:\n  {}",
            problems.join("\n  ")
        )));
    }
    Ok(CheckSummary {
        files: files.len(),
        provenance: reference.cloned().expect("at least one stamped file"),
    })
}
