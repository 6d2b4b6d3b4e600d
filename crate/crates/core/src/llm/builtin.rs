//! Canned responders for script files, driven by a planted-keyword table.
//! They read the role prompts through their section headings.

use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;

use super::ChatRequest;
use crate::prompting::{
    parse_class_blocks, section, SECTION_CLASSES, SECTION_CURRENT_CLASSES, SECTION_LABELS,
    SECTION_OUTCOME, SECTION_PAPER, SECTION_REVISIONS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuiltinResponder {
    /// Enhancer: lists neighbor categories in order of first appearance.
    NeighborEcho,
    /// Predictor: argmax word overlap between paper text and each
    /// description, ties to the first label.
    KeywordPredictor,
    /// Optimizer: on a wrong or invalid prediction, proposes the true
    /// class's keyword; otherwise proposes nothing.
    KeywordOptimizer,
    /// Summary: per-class word union of current description and revisions.
    KeywordSummary,
}

#[derive(Debug, Clone, Default)]
pub struct KeywordTable {
    keywords: BTreeMap<String, String>,
    word_cap: usize,
}

impl KeywordTable {
    pub fn new(keywords: BTreeMap<String, String>, word_cap: usize) -> Self {
        Self { keywords, word_cap }
    }
}

fn words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl BuiltinResponder {
    pub fn respond(self, table: &KeywordTable, req: &ChatRequest) -> String {
        let prompt = req.rendered();
        match self {
            Self::NeighborEcho => neighbor_echo(&prompt),
            Self::KeywordPredictor => keyword_predictor(&prompt),
            Self::KeywordOptimizer => keyword_optimizer(table, &prompt),
            Self::KeywordSummary => keyword_summary(table, &prompt),
        }
    }
}

fn neighbor_echo(prompt: &str) -> String {
    let mut seen = Vec::<String>::new();
    for line in prompt.lines() {
        let Ok(value) =
            serde_json::from_str::<serde_json::Value>(line.trim().trim_end_matches(','))
        else {
            continue;
        };
        if let Some(cat) = value.get("category").and_then(|c| c.as_str()) {
            if !seen.iter().any(|s| s == cat) {
                seen.push(cat.to_string());
            }
        }
    }
    if seen.is_empty() {
        "The papers cited in this essay carry no category information.".into()
    } else {
        format!(
            "The papers cited in this essay are about: {}.",
            seen.join(", ")
        )
    }
}

fn keyword_predictor(prompt: &str) -> String {
    let paper = words(section(prompt, SECTION_PAPER).unwrap_or_default());
    let labels: Vec<&str> = section(prompt, SECTION_LABELS)
        .unwrap_or_default()
        .split(',')
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    let blocks = parse_class_blocks(section(prompt, SECTION_CLASSES).unwrap_or_default());
    let score = |label: &str| {
        blocks
            .iter()
            .find(|b| b.label == label)
            .map_or(0, |b| words(&b.description).intersection(&paper).count())
    };
    let mut best = (labels.first().copied().unwrap_or("UNKNOWN"), 0);
    let mut analysis = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        let s = score(label);
        analysis.push(format!("{}. {label}: {s} shared word(s)", i + 1));
        if s > best.1 {
            best = (label, s);
        }
    }
    format!(
        "Judgment: {} has the largest overlap with the paper text.\nStep-by-Step Analysis:\n{}\nLABEL: {}",
        best.0,
        analysis.join("\n"),
        best.0
    )
}

fn outcome_field<'a>(outcome: &'a str, name: &str) -> Option<&'a str> {
    outcome
        .lines()
        .find_map(|l| l.strip_prefix(name))
        .map(str::trim)
}

fn keyword_optimizer(table: &KeywordTable, prompt: &str) -> String {
    let outcome = section(prompt, SECTION_OUTCOME).unwrap_or_default();
    let truth = outcome_field(outcome, "True label:").unwrap_or_default();
    let predicted = outcome_field(outcome, "Predicted label:").unwrap_or_default();
    if truth == predicted {
        return "The prediction is already correct; no revision is needed.".into();
    }
    match table.keywords.get(truth) {
        Some(keyword) => format!(
            "[CLASS] {truth}: {keyword}\nRATIONALE: the paper mentions {keyword}, which identifies {truth}."
        ),
        None => format!("No keyword is known for {truth}; leaving descriptions unchanged."),
    }
}

fn keyword_summary(table: &KeywordTable, prompt: &str) -> String {
    let current = parse_class_blocks(section(prompt, SECTION_CURRENT_CLASSES).unwrap_or_default());
    let revisions = parse_class_blocks(section(prompt, SECTION_REVISIONS).unwrap_or_default());
    let mut out = String::new();
    for block in &current {
        let mut merged: Vec<&str> = Vec::new();
        let sources = std::iter::once(block.description.as_str()).chain(
            revisions
                .iter()
                .filter(|r| r.label == block.label)
                .map(|r| r.description.as_str()),
        );
        for word in sources.flat_map(str::split_whitespace) {
            if !merged.contains(&word) && merged.len() < table.word_cap {
                merged.push(word);
            }
        }
        out.push_str(&format!("[CLASS] {}: {}\n", block.label, merged.join(" ")));
    }
    out.push_str("RATIONALE: merged proposed keywords into each class description.");
    out
}
