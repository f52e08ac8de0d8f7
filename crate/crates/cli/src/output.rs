//! Atomic artifact writing and the run manifest.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use tempfile::NamedTempFile;

use crate::config::RunConfig;

/// Writes `path` through a sibling temp file renamed into place.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = NamedTempFile::new_in(dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, |w| {
        for r in rows {
            serde_json::to_writer(&mut *w, r)?;
            writeln!(w)?;
        }
        Ok(())
    })
}

/// Version tag of this binary.
pub fn version_tag() -> String {
    format!("v{}-{}", env!("CARGO_PKG_VERSION"), env!("HOTA_GIT_REV"))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub scenario: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub version: String,
    pub float_mode: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig, seeds: Vec<u64>, out: &Path) -> Self {
        let scenario = match (&cfg.scenario, &cfg.opinion) {
            (Some(s), _) => s.name.clone(),
            _ => "opinion".into(),
        };
        RunManifest {
            command: command.into(),
            scenario,
            config_hash: cfg.hash(),
            seeds,
            output_dir: out.to_path_buf(),
            version: version_tag(),
            float_mode: if cfg.float32 { "f32" } else { "f64" }.into(),
            status: "completed".into(),
            error: None,
        }
    }
}
