use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EngineError, VerbalParameters};
use crate::eval::MetricsRecord;

/// Resumable run state written after every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_digest: String,
    pub step: usize,
    pub theta: VerbalParameters,
    /// Index of the next batch to run (0-based into the batch schedule).
    pub batch_cursor: usize,
    pub metrics_so_far: Vec<MetricsRecord>,
    pub transcript_len: usize,
    /// Cached test-node neighbor summaries, keyed by node, hops and
    /// template version.
    pub enhancer_cache: BTreeMap<String, Option<String>>,
}

impl Checkpoint {
    pub fn file_name(step: usize) -> String {
        format!("step-{step:04}.ckpt")
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf, EngineError> {
        std::fs::create_dir_all(dir).map_err(EngineError::io(dir))?;
        let path = dir.join(Self::file_name(self.step));
        let mut body = serde_json::to_string_pretty(self)
            .map_err(|e| EngineError::Checkpoint(e.to_string()))?;
        body.push('\n');
        // Write-then-rename so a crash never leaves a torn checkpoint.
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, body).map_err(EngineError::io(&tmp))?;
        std::fs::rename(&tmp, &path).map_err(EngineError::io(&path))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path).map_err(EngineError::io(path))?;
        serde_json::from_str(&text)
            .map_err(|e| EngineError::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// The checkpoint for `step` in the same directory as `self_path`.
    pub fn sibling(self_path: &Path, step: usize) -> PathBuf {
        self_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(Self::file_name(step))
    }
}
