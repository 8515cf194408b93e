//! The pipeline commands behind the CLI.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pcb_core::counterfactual::report::write_reports;
use pcb_core::counterfactual::{analyze, Analysis};
use pcb_core::model::Model;
use pcb_core::synth::{generate_cohort, split_dataset, Dataset, Split, DATASET_FILE, VOCAB_FILE};
use pcb_core::trainer::{
    evaluate, examples, load_checkpoint, save_checkpoint, train, write_history, Checkpoint, Example, Metrics,
    TrainReport,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.tsv";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const SPLIT_FILE: &str = "split.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const ANALYSIS_FILE: &str = "analysis.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub sha256: String,
    pub bytes: u64,
    pub command: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandEntry {
    pub seed: u64,
    pub config: RunConfig,
}

/// Index of every file a command wrote into a directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub commands: BTreeMap<String, CommandEntry>,
    pub files: BTreeMap<String, FileEntry>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Records `files` (relative to `dir`) under `command` in `dir/manifest.json`.
pub fn update_manifest(dir: &Path, command: &str, cfg: &RunConfig, files: &[String]) -> Result<Manifest, CliError> {
    let path = dir.join(MANIFEST_FILE);
    let mut m: Manifest = match std::fs::read(&path) {
        Ok(b) => serde_json::from_slice(&b).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?,
        Err(_) => Manifest::default(),
    };
    m.commands.insert(
        command.to_string(),
        CommandEntry {
            seed: cfg.seed,
            config: cfg.clone(),
        },
    );
    for f in files {
        let bytes = std::fs::read(dir.join(f))?;
        m.files.insert(
            f.clone(),
            FileEntry {
                sha256: hex(&Sha256::digest(&bytes)),
                bytes: bytes.len() as u64,
                command: command.to_string(),
            },
        );
    }
    write_json(&path, &m)?;
    Ok(m)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))
}

/// Generates the configured cohort into `out`.
pub fn gen(cfg: &RunConfig, out: &Path) -> Result<Dataset, CliError> {
    let ds = generate_cohort(&cfg.generator_config())?;
    create_dir(out)?;
    ds.save(out)?;
    update_manifest(out, "gen", cfg, &[DATASET_FILE.into(), VOCAB_FILE.into()])?;
    Ok(ds)
}

pub fn load_dataset(data: &Path) -> Result<Dataset, CliError> {
    if !data.join(DATASET_FILE).exists() {
        return Err(CliError::data(format!(
            "no dataset at {} (run `pcb gen` first)",
            data.display()
        )));
    }
    let ds = Dataset::load(data)?;
    if ds.is_empty() {
        return Err(CliError::data(format!("dataset at {} is empty", data.display())));
    }
    Ok(ds)
}

pub fn load_model(run: &Path) -> Result<Checkpoint, CliError> {
    let path = run.join(CHECKPOINT_FILE);
    if !path.exists() {
        return Err(CliError::data(format!(
            "no checkpoint at {} (run `pcb train` first)",
            path.display()
        )));
    }
    Ok(load_checkpoint(&path)?)
}

fn split_for(cfg: &RunConfig, ds: &Dataset) -> Result<Split, CliError> {
    Ok(split_dataset(ds.len(), cfg.trainer.split, cfg.seed)?)
}

fn check_template(cfg: &RunConfig, ds: &Dataset) -> Result<(), CliError> {
    if ds.header.template != cfg.template {
        return Err(CliError::data(format!(
            "dataset template `{}` does not match config template `{}`",
            ds.header.template, cfg.template
        )));
    }
    Ok(())
}

/// Trains on the split of the dataset in `data`; writes the checkpoint and history into `run`.
pub fn train_run(cfg: &RunConfig, data: &Path, run: &Path, mut progress: impl FnMut(&str)) -> Result<TrainReport, CliError> {
    let ds = load_dataset(data)?;
    check_template(cfg, &ds)?;
    let split = split_for(cfg, &ds)?;
    let ec = cfg.encode_config();
    let tr = examples(&ds, Some(&split.train), &ec)?;
    let tu = examples(&ds, Some(&split.tune), &ec)?;
    let mut model = Model::new(cfg.model_config(ds.vocab.len()), cfg.seed)?;
    let report = train(&mut model, &tr, &tu, &cfg.train_config(), |r| {
        progress(&format!(
            "epoch {} train_loss {:.5} tune_loss {:.5} lr {:.3e} tau {:.4}",
            r.epoch, r.train_loss, r.tune_loss, r.lr, r.tau
        ))
    })?;
    create_dir(run)?;
    save_checkpoint(&model, &ds.vocab, &run.join(CHECKPOINT_FILE))?;
    let mut h = Vec::new();
    write_history(&report.history, &mut h)?;
    std::fs::write(run.join(HISTORY_FILE), h)?;
    write_json(&run.join(TRAIN_REPORT_FILE), &report)?;
    write_json(&run.join(SPLIT_FILE), &split)?;
    update_manifest(
        run,
        "train",
        cfg,
        &[CHECKPOINT_FILE.into(), HISTORY_FILE.into(), TRAIN_REPORT_FILE.into(), SPLIT_FILE.into()],
    )?;
    Ok(report)
}

/// A checkpoint together with the dataset it was trained on.
pub struct Frozen {
    pub model: Model,
    pub dataset: Dataset,
    pub examples: Vec<Example>,
}

/// Loads the run's checkpoint and the dataset and encodes every patient.
pub fn load_frozen(cfg: &RunConfig, data: &Path, run: &Path) -> Result<Frozen, CliError> {
    let ckpt = load_model(run)?;
    let ds = load_dataset(data)?;
    check_template(cfg, &ds)?;
    if ckpt.vocab != ds.vocab {
        return Err(CliError::data("checkpoint vocabulary does not match the dataset vocabulary"));
    }
    let ec = pcb_core::synth::EncodeConfig {
        max_len: ckpt.model.config.encoder.max_len,
        ..cfg.encode_config()
    };
    let ex = examples(&ds, None, &ec)?;
    Ok(Frozen {
        model: ckpt.model,
        dataset: ds,
        examples: ex,
    })
}

/// Metrics of the frozen model on the validation split.
pub fn eval_run(cfg: &RunConfig, data: &Path, run: &Path) -> Result<Metrics, CliError> {
    let f = load_frozen(cfg, data, run)?;
    let split = split_for(cfg, &f.dataset)?;
    let valid: Vec<Example> = split.valid.iter().map(|&i| f.examples[i].clone()).collect();
    let m = evaluate(&f.model, &valid)?;
    write_json(&run.join(METRICS_FILE), &m)?;
    update_manifest(run, "eval", cfg, &[METRICS_FILE.into()])?;
    Ok(m)
}

/// Cluster analysis of the whole cohort.
pub fn analysis_of(cfg: &RunConfig, f: &Frozen) -> Result<Analysis, CliError> {
    let ages: Vec<f64> = f.dataset.patients.iter().map(|p| p.baseline_age).collect();
    Ok(analyze(&f.model, &f.examples, Some(&ages), &cfg.analysis_config())?)
}

/// Writes cluster, UpSet and sanity reports into `run`.
pub fn analyze_run(cfg: &RunConfig, data: &Path, run: &Path) -> Result<Analysis, CliError> {
    let f = load_frozen(cfg, data, run)?;
    let a = analysis_of(cfg, &f)?;
    let mut files = write_reports(&a, f.model.concept_specs(), run)?;
    write_json(&run.join(ANALYSIS_FILE), &a)?;
    files.push(ANALYSIS_FILE.into());
    update_manifest(run, "analyze", cfg, &files)?;
    Ok(a)
}

/// Resolves the dataset and run directories from flags and config.
pub fn dirs(cfg: &RunConfig, data: Option<PathBuf>, run: Option<PathBuf>) -> (PathBuf, PathBuf) {
    (
        data.unwrap_or_else(|| cfg.paths.data.clone()),
        run.unwrap_or_else(|| cfg.paths.run.clone()),
    )
}
