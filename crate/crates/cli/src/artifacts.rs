//! Reading inputs and writing run artifacts. Every write goes to a temporary
//! file in the target directory and is renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use affmtl::data::{load_corpus, AnnotationRecord};
use affmtl::training::{log_csv, Checkpoint, FeatureBank, TrainOutcome};
use affmtl::{Error, Result};

pub const ANNOTATIONS: &str = "annotations.csv";
pub const FEATURES: &str = "features.bin";

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_data(dir: &Path) -> Result<Vec<AnnotationRecord>> {
    let (records, _) = load_corpus(&dir.join(ANNOTATIONS), &dir.join(FEATURES))?;
    Ok(records)
}

pub fn load_banks(paths: &[PathBuf]) -> Result<Vec<FeatureBank>> {
    paths.iter().map(|p| FeatureBank::load(p)).collect()
}

pub fn load_checkpoints(paths: &[PathBuf]) -> Result<Vec<Checkpoint>> {
    paths.iter().map(|p| Checkpoint::load(p)).collect()
}

/// Writes `config`, `checkpoint.best`, `log.csv`, `report` and `report.json`.
pub fn write_run(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    let ck = &outcome.checkpoint;
    write_atomic(&dir.join("config"), ck.config.to_toml().as_bytes())?;
    write_atomic(&dir.join("checkpoint.best"), &ck.to_bytes())?;
    write_atomic(&dir.join("log.csv"), log_csv(&outcome.log).as_bytes())?;
    let best = outcome
        .log
        .iter()
        .find(|e| e.epoch == ck.best_epoch)
        .ok_or_else(|| Error::Integrity("best epoch missing from the log".into()))?;
    write_report(dir, &best.report)
}

pub fn write_report(dir: &Path, report: &affmtl::metrics::EvalReport) -> Result<()> {
    write_atomic(&dir.join("report"), report.to_kv_text().as_bytes())?;
    write_atomic(&dir.join("report.json"), report.to_json().as_bytes())
}
