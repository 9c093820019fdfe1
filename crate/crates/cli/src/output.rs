//! Output directory handling: atomic writes, CSV helpers and the run
//! manifest.

use crate::config::RunConfig;
use crate::{CliError, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
    /// Header row for CSV files.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub columns: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_sha256: String,
    pub config: RunConfig,
    pub seeds: crate::config::Seeds,
    pub rng_scheme: &'static str,
    pub derived: serde_json::Value,
    pub wall_clock_seconds: f64,
    pub files: Vec<FileEntry>,
}

/// Collects the files of one run and writes them atomically.
pub struct OutputDir {
    dir: PathBuf,
    files: Vec<FileEntry>,
    started: Instant,
}

impl OutputDir {
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Self {
            dir,
            files: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let target = self.dir.join(name);
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| CliError::io(&self.dir, e))?;
        tmp.write_all(bytes).map_err(|e| CliError::io(&target, e))?;
        // temp files are created 0600
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            tmp.as_file()
                .set_permissions(std::fs::Permissions::from_mode(0o644))
                .map_err(|e| CliError::io(&target, e))?;
        }
        tmp.persist(&target).map_err(|e| CliError::io(&target, e.error))?;
        let columns = name
            .ends_with(".csv")
            .then(|| String::from_utf8_lossy(bytes).lines().next().unwrap_or("").to_string());
        self.files.retain(|f| f.name != name);
        self.files.push(FileEntry {
            name: name.to_string(),
            bytes: bytes.len(),
            sha256: sha256_hex(bytes),
            columns,
        });
        Ok(target)
    }

    /// Renders with `f` into memory, then [`write`](Self::write)s.
    pub fn write_with(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    ) -> Result<PathBuf> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(|e| CliError::io(self.dir.join(name), e))?;
        self.write(name, &buf)
    }

    pub fn files(&self) -> &[FileEntry] {
        &self.files
    }

    pub fn finish(mut self, command: &str, cfg: &RunConfig, derived: serde_json::Value) -> Result<RunManifest> {
        let canonical = serde_json::to_string(cfg).expect("config serializes");
        let manifest = RunManifest {
            manifest_version: MANIFEST_VERSION,
            tool: "riskstab",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config_sha256: sha256_hex(canonical.as_bytes()),
            config: cfg.clone(),
            seeds: cfg.seeds(),
            rng_scheme: riskstab::stochsys::RNG_SCHEME_ID,
            derived,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            files: std::mem::take(&mut self.files),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        self.write(MANIFEST_NAME, text.as_bytes())?;
        Ok(manifest)
    }
}

/// `value,cdf` rows of the empirical CDF at levels `k/points`.
pub fn ecdf_csv(sorted: &[f64], points: usize, out: &mut Vec<u8>) -> std::io::Result<()> {
    writeln!(out, "value,cdf")?;
    let n = sorted.len();
    for k in 1..=points {
        let p = k as f64 / points as f64;
        let idx = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
        writeln!(out, "{:e},{:e}", sorted[idx], (idx + 1) as f64 / n as f64)?;
    }
    Ok(())
}

/// Order-statistic quantile `z_(⌈pn⌉)` of a sorted sample.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let idx = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

pub fn sort_values(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}
