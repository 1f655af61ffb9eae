//! Run manifests: every command writes exactly one `manifest.json` into its
//! output directory recording what ran, over which inputs, and what came out,
//! so a run can be audited or repeated from the directory alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use kscan::error::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn now_epoch_s() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Refuses to start a run in a directory that already holds a manifest,
/// keeping the one-manifest-per-run invariant. `allow_existing` is for
/// resumed runs, which legitimately continue in their own directory.
pub fn ensure_fresh_run_dir(out: &Path, allow_existing: bool) -> Result<()> {
    if !allow_existing && out.join("manifest.json").exists() {
        return Err(Error::Config(format!(
            "output directory {} already contains a run manifest; pick a fresh directory",
            out.display()
        )));
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

#[derive(Serialize)]
pub struct RunManifest {
    command: String,
    config_path: Option<PathBuf>,
    output_dir: PathBuf,
    started_at_epoch_s: u64,
    finished_at_epoch_s: u64,
    version: String,
    seed: Option<u64>,
    input_hashes: BTreeMap<String, String>,
    output_hashes: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn begin(command: &str, config_path: Option<&Path>, out: &Path, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            output_dir: out.to_path_buf(),
            started_at_epoch_s: now_epoch_s(),
            finished_at_epoch_s: 0,
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            input_hashes: BTreeMap::new(),
            output_hashes: BTreeMap::new(),
        }
    }

    pub fn input_file(&mut self, label: &str, path: &Path) -> Result<()> {
        self.input_hashes.insert(label.to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn input_text(&mut self, label: &str, text: &str) {
        self.input_hashes.insert(label.to_string(), sha256_bytes(text.as_bytes()));
    }

    pub fn output_file(&mut self, label: &str, path: &Path) -> Result<()> {
        self.output_hashes.insert(label.to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Stamps the finish time and writes `manifest.json` into the run dir.
    pub fn finish(mut self) -> Result<PathBuf> {
        self.finished_at_epoch_s = now_epoch_s();
        let path = self.output_dir.join("manifest.json");
        let doc = serde_json::to_string_pretty(&self)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        std::fs::write(&path, doc)?;
        Ok(path)
    }
}
