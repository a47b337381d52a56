//! Output directories where every file gets a `<file>.meta.json` sidecar
//! holding the resolved configuration and seed.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::CliError;

#[derive(Debug, Clone)]
pub struct OutputDir {
    root: PathBuf,
    experiment: String,
    config: Value,
    seed: Option<u64>,
}

impl OutputDir {
    pub fn create(
        root: impl Into<PathBuf>,
        experiment: &str,
        config: &impl Serialize,
        seed: Option<u64>,
    ) -> Result<Self, CliError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| CliError::io(&root, e))?;
        Ok(OutputDir {
            root,
            experiment: experiment.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            seed,
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    /// A nested directory with its own metadata.
    pub fn subdir(&self, rel: &str, config: &impl Serialize, seed: Option<u64>) -> Result<OutputDir, CliError> {
        OutputDir::create(self.root.join(rel), &self.experiment, config, seed)
    }

    pub fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let path = self.root.join(rel);
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        let meta = json!({
            "experiment": self.experiment,
            "file": rel,
            "seed": self.seed,
            "config": self.config,
        });
        let meta_path = self.root.join(format!("{rel}.meta.json"));
        let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        std::fs::write(&meta_path, text + "\n").map_err(|e| CliError::io(&meta_path, e))?;
        Ok(path)
    }

    pub fn write_json(&self, rel: &str, value: &impl Serialize) -> Result<PathBuf, CliError> {
        let text = serde_json::to_string_pretty(value).expect("value serializes");
        self.write(rel, text + "\n")
    }
}
