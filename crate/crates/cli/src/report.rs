//! Report envelopes. Report files are deterministic; wall-clock data lives
//! in a `.meta.json` sidecar next to each report.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use gnq_core::{AuditError, Result};
use serde::Serialize;

use crate::config::RunConfig;

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_hash: String,
    report: &'a T,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    report: &'a str,
    created_unix_seconds: u64,
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| AuditError::io(path, e))
}

/// Writes `<dir>/<name>.json` and its timestamp sidecar.
pub fn write_report<T: Serialize>(
    dir: &Path,
    name: &str,
    command: &str,
    cfg: &RunConfig,
    report: &T,
) -> Result<PathBuf> {
    let file = format!("{name}.json");
    let path = dir.join(&file);
    let envelope = Envelope {
        tool: "gnq",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_hash: cfg.hash(),
        report,
    };
    let mut text = serde_json::to_string_pretty(&envelope)?;
    text.push('\n');
    write_text(&path, &text)?;

    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let sidecar = Sidecar {
        report: &file,
        created_unix_seconds: created,
    };
    let meta = dir.join(format!("{name}.meta.json"));
    write_text(&meta, &serde_json::to_string_pretty(&sidecar)?)?;
    Ok(path)
}
