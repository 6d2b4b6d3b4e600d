//! Verbalized parameters: the per-class natural-language descriptions that
//! play the role of model weights, plus the per-node artifacts of one step.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::graph::NodeId;
use crate::prompting::{parse_class_blocks, truncate_words};

/// Placeholder description used when no prior is given.
pub const BLANK_DESCRIPTION: &str = "No description available yet.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaOrigin {
    Prior,
    Blank,
    Summarized,
    AblationConcat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDescription {
    pub label: String,
    pub description: String,
}

/// One version of the class descriptions. Entries follow label-set order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbalParameters {
    pub step: usize,
    pub origin: ThetaOrigin,
    pub per_class: Vec<ClassDescription>,
}

impl VerbalParameters {
    pub fn blank(labels: &[String]) -> Self {
        Self {
            step: 0,
            origin: ThetaOrigin::Blank,
            per_class: labels
                .iter()
                .map(|l| ClassDescription {
                    label: l.clone(),
                    description: BLANK_DESCRIPTION.into(),
                })
                .collect(),
        }
    }

    pub fn get(&self, label: &str) -> Option<&str> {
        self.per_class
            .iter()
            .find(|c| c.label == label)
            .map(|c| c.description.as_str())
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.per_class.iter().map(|c| c.label.as_str())
    }

    pub fn is_placeholder(&self, label: &str) -> bool {
        self.get(label) == Some(BLANK_DESCRIPTION)
    }

    /// Successor version with the given descriptions.
    pub fn next(&self, origin: ThetaOrigin, per_class: Vec<ClassDescription>) -> Self {
        Self {
            step: self.step + 1,
            origin,
            per_class,
        }
    }

    /// Human-readable export; also the prior file format.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# step: {}\n# origin: {}\n",
            self.step,
            serde_json::to_value(self.origin)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default()
        );
        for c in &self.per_class {
            out.push_str(&format!("[CLASS] {}: {}\n", c.label, c.description));
        }
        out
    }

    /// Reads a θ text file (prior or export). Every label must be present
    /// exactly as listed in `labels`; unknown classes are rejected.
    pub fn from_text(
        text: &str,
        labels: &[String],
        max_desc_words: usize,
    ) -> Result<Self, EngineError> {
        let mut step = 0;
        let mut origin = ThetaOrigin::Prior;
        for line in text.lines() {
            if let Some(v) = line.strip_prefix("# step:") {
                step = v.trim().parse().unwrap_or(0);
            } else if let Some(v) = line.strip_prefix("# origin:") {
                origin = serde_json::from_value(serde_json::Value::String(v.trim().into()))
                    .unwrap_or(ThetaOrigin::Prior);
            }
        }
        let mut found: BTreeMap<String, String> = BTreeMap::new();
        for block in parse_class_blocks(text) {
            let Some(label) = crate::prompting::match_label(&block.label, labels) else {
                return Err(EngineError::PriorUnknownClass(block.label));
            };
            found.insert(
                label,
                truncate_words(&block.description, max_desc_words).into(),
            );
        }
        let per_class = labels
            .iter()
            .map(|l| {
                found
                    .remove(l)
                    .map(|description| ClassDescription {
                        label: l.clone(),
                        description,
                    })
                    .ok_or_else(|| EngineError::PriorMissingClass(l.clone()))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            step,
            origin,
            per_class,
        })
    }
}

/// Initial parameters: from a prior file when given, else placeholders.
pub fn init_theta(
    labels: &[String],
    prior: Option<&Path>,
    max_desc_words: usize,
) -> Result<VerbalParameters, EngineError> {
    match prior {
        None => Ok(VerbalParameters::blank(labels)),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| EngineError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            let mut theta = VerbalParameters::from_text(&text, labels, max_desc_words)?;
            theta.step = 0;
            theta.origin = ThetaOrigin::Prior;
            Ok(theta)
        }
    }
}

/// A node's own text plus the verbalized summary of its neighborhood.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhancedRepresentation {
    pub node_id: NodeId,
    pub own_text: String,
    pub neighbor_summary: Option<String>,
    pub hop_count: usize,
}

/// Per-node optimizer output within one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntermediateUpdate {
    pub node_id: NodeId,
    pub step: usize,
    pub per_class_revisions: BTreeMap<String, String>,
    pub rationale: String,
    pub was_correct: bool,
}

impl IntermediateUpdate {
    pub fn is_empty(&self) -> bool {
        self.per_class_revisions.is_empty()
    }
}
