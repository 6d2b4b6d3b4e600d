//! Append-only record of every prompt and completion in a run.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::graph::NodeId;
use crate::llm::ChatMessage;
use crate::prompting::RoleTag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Eval,
}

pub mod flags {
    pub const PARSE_RETRY: &str = "parse-retry";
    pub const INVALID_PREDICTION: &str = "invalid-prediction";
    pub const NO_CLASS_BLOCKS: &str = "no-class-blocks";
    pub const SKIPPED_CORRECT: &str = "skipped-correct";
}

/// An exchange not yet assigned a sequence number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exchange {
    pub role: RoleTag,
    pub node: Option<NodeId>,
    pub attempt: u32,
    pub messages: Vec<ChatMessage>,
    pub completion: Option<String>,
    pub flag: Option<&'static str>,
}

impl Exchange {
    pub fn event(role: RoleTag, node: Option<NodeId>, flag: &'static str) -> Self {
        Self {
            role,
            node,
            attempt: 0,
            messages: Vec::new(),
            completion: None,
            flag: Some(flag),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub step: usize,
    pub phase: Phase,
    pub role: RoleTag,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub node: Option<NodeId>,
    pub attempt: u32,
    pub messages: Vec<ChatMessage>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub completion: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flag: Option<String>,
}

/// In-memory transcript, optionally mirrored to a JSON-lines file.
#[derive(Debug, Default)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
    path: Option<PathBuf>,
    flushed: usize,
}

impl Transcript {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Starts a fresh transcript file, truncating any existing one.
    pub fn create(path: &Path) -> Result<Self, EngineError> {
        File::create(path).map_err(EngineError::io(path))?;
        Ok(Self {
            entries: Vec::new(),
            path: Some(path.to_path_buf()),
            flushed: 0,
        })
    }

    /// Reopens a transcript keeping only its first `keep` entries.
    pub fn reopen(path: &Path, keep: usize) -> Result<Self, EngineError> {
        let mut entries = read_transcript(path)?;
        if entries.len() < keep {
            return Err(EngineError::Checkpoint(format!(
                "transcript {} has {} entries, checkpoint expects {keep}",
                path.display(),
                entries.len()
            )));
        }
        entries.truncate(keep);
        let mut t = Self {
            entries,
            path: Some(path.to_path_buf()),
            flushed: 0,
        };
        File::create(path).map_err(EngineError::io(path))?;
        t.flush()?;
        Ok(t)
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn commit(
        &mut self,
        step: usize,
        phase: Phase,
        exchanges: impl IntoIterator<Item = Exchange>,
    ) {
        for ex in exchanges {
            let seq = self.entries.len() as u64;
            self.entries.push(TranscriptEntry {
                seq,
                step,
                phase,
                role: ex.role,
                node: ex.node,
                attempt: ex.attempt,
                messages: ex.messages,
                completion: ex.completion,
                flag: ex.flag.map(str::to_string),
            });
        }
    }

    /// Appends entries not yet written to the backing file.
    pub fn flush(&mut self) -> Result<(), EngineError> {
        let Some(path) = &self.path else {
            self.flushed = self.entries.len();
            return Ok(());
        };
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(EngineError::io(path))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries[self.flushed..] {
            serde_json::to_writer(&mut w, e).map_err(|e| EngineError::Checkpoint(e.to_string()))?;
            w.write_all(b"\n").map_err(EngineError::io(path))?;
        }
        w.flush().map_err(EngineError::io(path))?;
        self.flushed = self.entries.len();
        Ok(())
    }
}

pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptEntry>, EngineError> {
    let file = File::open(path).map_err(EngineError::io(path))?;
    BufReader::new(file)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|line| {
            let line = line.map_err(EngineError::io(path))?;
            serde_json::from_str(&line)
                .map_err(|e| EngineError::Checkpoint(format!("{}: {e}", path.display())))
        })
        .collect()
}
