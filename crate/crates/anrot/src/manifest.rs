//! Run manifests: the resolved configuration written next to the artifacts.
//!
//! A manifest is itself a valid config file (provenance lines are `#`
//! comments), so `--config <manifest>` re-runs the exact configuration.
//! Content is a pure function of the resolved config and the provenance —
//! no timestamps — so equal runs write byte-identical manifests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{key_values, RunConfig};
use crate::CliError;

/// Where the values came from, recorded as comments.
pub struct Provenance<'a> {
    pub command: &'static str,
    pub config_file: Option<&'a Path>,
    /// Flag and `--set` overrides in application order.
    pub overrides: &'a [(String, String)],
}

pub fn manifest_path(out_dir: &Path, command: &str) -> PathBuf {
    out_dir.join(format!("manifest-{command}.txt"))
}

/// Writes `manifest-<command>.txt` into the output directory and returns
/// its path.
pub fn write_manifest(
    out_dir: &Path,
    cfg: &RunConfig,
    prov: &Provenance,
) -> Result<PathBuf, CliError> {
    let mut text = String::new();
    writeln!(text, "# anrot {} manifest", prov.command).expect("string write");
    writeln!(text, "# version = {}", env!("CARGO_PKG_VERSION")).expect("string write");
    match prov.config_file {
        Some(path) => writeln!(text, "# config-file = {}", path.display()),
        None => writeln!(text, "# config-file = (none)"),
    }
    .expect("string write");
    for (key, value) in prov.overrides {
        writeln!(text, "# override: {key} = {value}").expect("string write");
    }
    for (key, value) in key_values(cfg) {
        writeln!(text, "{key} = {value}").expect("string write");
    }
    let path = manifest_path(out_dir, prov.command);
    fs::write(&path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}
