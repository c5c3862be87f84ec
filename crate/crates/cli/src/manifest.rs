//! Run manifests. Every command writes exactly one `manifest.json` into its
//! output directory, listing every result file written next to it.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, CliResult};
use crate::io::write_json;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct CellError {
    pub cell: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub jobs: usize,
    /// Every setting the run used, defaults included.
    pub config: Value,
    /// Headline numbers of the run.
    pub results: Value,
    pub outputs: Vec<String>,
    pub errors: Vec<CellError>,
    pub wall_time_secs: f64,
}

/// Output directory that records the files written into it.
#[derive(Debug)]
pub struct OutDir {
    dir: PathBuf,
    outputs: Vec<String>,
}

impl OutDir {
    pub fn create(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), outputs: Vec::new() })
    }

    /// Path of a result file, registered for the manifest.
    pub fn file(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.dir.join(name)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes the manifest and returns its path.
    pub fn finish(self, mut manifest: RunManifest) -> CliResult<PathBuf> {
        manifest.outputs = self.outputs;
        let path = self.dir.join(MANIFEST_FILE);
        write_json(&path, &manifest)?;
        Ok(path)
    }
}
