//! Prompt rendering for the four roles and parsing of their completions.
//!
//! Completions follow a small line grammar imposed by the instructions:
//! the predictor ends with `LABEL: <label>`, the optimizer and summary
//! emit `[CLASS] <label>: <description>` blocks followed by `RATIONALE:`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EnhancedRepresentation, IntermediateUpdate, VerbalParameters};
use crate::llm::ChatMessage;

/// Bumped whenever any template text changes; keys the enhancer cache.
pub const TEMPLATE_VERSION: &str = "v1";

pub const DEFAULT_MAX_DESC_WORDS: usize = 200;

/// Re-authored one-shot exemplar for Cora-style citation data.
pub const DEFAULT_CORA_EXEMPLAR: &str = include_str!("../resources/one_shot_cora.txt");
/// Hand-written Cora class descriptions in the θ text format.
pub const DEFAULT_CORA_PRIOR: &str = include_str!("../resources/cora_prior.txt");

const ENHANCER_SYSTEM: &str = include_str!("../resources/templates/enhancer_system.txt");
const ENHANCER: &str = include_str!("../resources/templates/enhancer.txt");
const PREDICTOR_SYSTEM: &str = include_str!("../resources/templates/predictor_system.txt");
const PREDICTOR: &str = include_str!("../resources/templates/predictor.txt");
const OPTIMIZER_SYSTEM: &str = include_str!("../resources/templates/optimizer_system.txt");
const OPTIMIZER: &str = include_str!("../resources/templates/optimizer.txt");
const SUMMARY_SYSTEM: &str = include_str!("../resources/templates/summary_system.txt");
const SUMMARY: &str = include_str!("../resources/templates/summary.txt");

pub const SECTION_PAPER: &str = "## Paper";
pub const SECTION_NEIGHBORS: &str = "## Neighbor summary";
pub const SECTION_CLASSES: &str = "## Class descriptions";
pub const SECTION_CURRENT_CLASSES: &str = "## Current class descriptions";
pub const SECTION_LABELS: &str = "## Label options";
pub const SECTION_OUTCOME: &str = "## Prediction outcome";
pub const SECTION_REVISIONS: &str = "## Proposed revisions";
pub const SECTION_EXEMPLAR: &str = "## Worked example";

pub const NO_NEIGHBORS_NOTICE: &str = "There are no cited papers available for this paper.";
pub const NO_SUMMARY_NOTICE: &str = "No neighbor information is available.";
pub const INVALID_LABEL: &str = "INVALID";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("theta has no description for class `{0}`")]
    MissingClassDescription(String),
    #[error("summary prompt needs at least one update")]
    EmptyBatchUpdates,
    #[error("completion contains no usable [CLASS] blocks")]
    NoClassBlocksFound,
    #[error("one-shot mode requires a non-empty exemplar")]
    EmptyExemplar,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CoTMode {
    ZeroShot,
    OneShot { exemplar: String },
}

impl CoTMode {
    pub fn one_shot(exemplar: impl Into<String>) -> Result<Self, PromptError> {
        let exemplar = exemplar.into();
        if exemplar.trim().is_empty() {
            return Err(PromptError::EmptyExemplar);
        }
        Ok(Self::OneShot { exemplar })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleTag {
    Enhancer,
    Predictor,
    Optimizer,
    Summary,
}

impl RoleTag {
    pub const ALL: [RoleTag; 4] = [
        Self::Enhancer,
        Self::Predictor,
        Self::Optimizer,
        Self::Summary,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Enhancer => "enhancer",
            Self::Predictor => "predictor",
            Self::Optimizer => "optimizer",
            Self::Summary => "summary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub role_tag: RoleTag,
    pub system: String,
    pub user: String,
}

impl PromptBundle {
    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![
            ChatMessage::system(self.system.clone()),
            ChatMessage::user(self.user.clone()),
        ]
    }
}

/// A predicted class or the marker for an unusable answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictedLabel {
    Label(String),
    Invalid,
}

impl PredictedLabel {
    pub fn as_label(&self) -> Option<&str> {
        match self {
            Self::Label(l) => Some(l),
            Self::Invalid => None,
        }
    }

    pub fn display(&self) -> &str {
        self.as_label().unwrap_or(INVALID_LABEL)
    }

    pub fn matches(&self, truth: &str) -> bool {
        self.as_label() == Some(truth)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedPrediction {
    pub label: PredictedLabel,
    pub judgment: String,
    pub analysis: String,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedThetaText {
    pub per_class: BTreeMap<String, String>,
    pub rationale: String,
    pub raw: String,
}

/// Neighbor content and, when known, its category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborInfo {
    pub text: String,
    pub label: Option<String>,
}

/// Single-pass `{{key}}` substitution; inserted values are never rescanned.
fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                let key = &after[..end];
                match values.iter().find(|(k, _)| *k == key) {
                    Some((_, v)) => out.push_str(v),
                    None => panic!("template key `{key}` has no value"),
                }
                rest = &after[end + 2..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

fn class_blocks(theta: &VerbalParameters) -> String {
    theta
        .per_class
        .iter()
        .map(|c| format!("[CLASS] {}: {}", c.label, c.description))
        .collect::<Vec<_>>()
        .join("\n")
}

fn summary_or_notice(z: &EnhancedRepresentation) -> &str {
    z.neighbor_summary.as_deref().unwrap_or(NO_SUMMARY_NOTICE)
}

pub fn render_enhancer_prompt(neighbors: &[NeighborInfo]) -> PromptBundle {
    let section = if neighbors.is_empty() {
        format!("{NO_NEIGHBORS_NOTICE}\n")
    } else {
        let records: Vec<String> = neighbors
            .iter()
            .map(|n| {
                let mut record = serde_json::Map::new();
                record.insert("content".into(), n.text.clone().into());
                if let Some(label) = &n.label {
                    record.insert("category".into(), label.clone().into());
                }
                format!("  {}", serde_json::Value::Object(record))
            })
            .collect();
        format!(
            "The following list records some papers related to the current one.\n[\n{}\n]\n",
            records.join(",\n")
        )
    };
    PromptBundle {
        role_tag: RoleTag::Enhancer,
        system: ENHANCER_SYSTEM.trim_end().into(),
        user: fill(ENHANCER, &[("neighbor_section", &section)]),
    }
}

pub fn render_predictor_prompt(
    z: &EnhancedRepresentation,
    theta: &VerbalParameters,
    mode: &CoTMode,
    labels: &[String],
) -> Result<PromptBundle, PromptError> {
    if let Some(missing) = labels.iter().find(|l| theta.get(l).is_none()) {
        return Err(PromptError::MissingClassDescription(missing.clone()));
    }
    let exemplar_block = match mode {
        CoTMode::ZeroShot => String::new(),
        CoTMode::OneShot { exemplar } => exemplar_block(exemplar),
    };
    let placeholder_note = if labels.iter().any(|l| theta.is_placeholder(l)) {
        " Some classes have no description yet; for those, judge from the paper text alone and your general knowledge of the class name."
    } else {
        ""
    };
    let user = fill(
        PREDICTOR,
        &[
            ("exemplar_block", &exemplar_block),
            ("node_text", &z.own_text),
            ("neighbor_summary", summary_or_notice(z)),
            ("class_blocks", &class_blocks(theta)),
            ("label_options", &labels.join(", ")),
            ("placeholder_note", placeholder_note),
        ],
    );
    Ok(PromptBundle {
        role_tag: RoleTag::Predictor,
        system: PREDICTOR_SYSTEM.trim_end().into(),
        user,
    })
}

/// The block one-shot mode prepends to the predictor prompt.
pub fn exemplar_block(exemplar: &str) -> String {
    format!("{SECTION_EXEMPLAR}\n{}\n\n", exemplar.trim_end())
}

/// Stricter variant used for the single parse retry.
pub fn with_label_only_suffix(bundle: &PromptBundle, labels: &[String]) -> PromptBundle {
    let mut strict = bundle.clone();
    strict.user.push_str(&format!(
        "\nYour previous answer could not be parsed. Output ONLY one line of the form `LABEL: <label>` using one of: {}.\n",
        labels.join(", ")
    ));
    strict
}

pub fn render_optimizer_prompt(
    z: &EnhancedRepresentation,
    y_true: &str,
    y_pred: &PredictedLabel,
    theta_prev: &VerbalParameters,
    max_desc_words: usize,
) -> PromptBundle {
    let (outcome, task) = match y_pred {
        PredictedLabel::Label(p) if p == y_true => (
            "The prediction was correct.".to_string(),
            format!(
                "Reinforce the description of {y_true} only: refine it so that papers like this one keep being matched to {y_true}, without making it specific to this single paper. Do not revise any other class."
            ),
        ),
        PredictedLabel::Label(p) => (
            format!("The prediction was wrong: the paper belongs to {y_true}, not {p}."),
            format!(
                "Revise the descriptions of the two classes involved, {y_true} and {p}, so that this paper would be matched to {y_true} and no longer to {p}. State what distinguishes {y_true} from {p}."
            ),
        ),
        PredictedLabel::Invalid => (
            "The predictor's answer could not be parsed into a valid label.".to_string(),
            format!(
                "Sharpen the description of {y_true} so that this paper would be clearly and unambiguously matched to {y_true}."
            ),
        ),
    };
    let user = fill(
        OPTIMIZER,
        &[
            ("node_text", &z.own_text),
            ("neighbor_summary", summary_or_notice(z)),
            ("class_blocks", &class_blocks(theta_prev)),
            ("true_label", y_true),
            ("predicted_label", y_pred.display()),
            ("outcome", &outcome),
            ("task", &task),
            ("max_words", &max_desc_words.to_string()),
        ],
    );
    PromptBundle {
        role_tag: RoleTag::Optimizer,
        system: OPTIMIZER_SYSTEM.trim_end().into(),
        user,
    }
}

pub fn render_summary_prompt(
    updates: &[IntermediateUpdate],
    theta_prev: &VerbalParameters,
    max_desc_words: usize,
) -> Result<PromptBundle, PromptError> {
    if updates.is_empty() {
        return Err(PromptError::EmptyBatchUpdates);
    }
    let revisions: Vec<String> = updates
        .iter()
        .map(|u| {
            let verdict = if u.was_correct {
                "correct"
            } else {
                "incorrect"
            };
            let mut block = format!(
                "### Revision from node {} (step {}, prediction {verdict})\n",
                u.node_id, u.step
            );
            if u.per_class_revisions.is_empty() {
                block.push_str("(no revision proposed)\n");
            }
            // Revisions follow label-set order, matching theta.
            for label in theta_prev.labels() {
                if let Some(d) = u.per_class_revisions.get(label) {
                    block.push_str(&format!("[CLASS] {label}: {d}\n"));
                }
            }
            if !u.rationale.is_empty() {
                block.push_str(&format!("Rationale: {}\n", u.rationale));
            }
            block
        })
        .collect();
    let labels: Vec<&str> = theta_prev.labels().collect();
    let user = fill(
        SUMMARY,
        &[
            ("class_blocks", &class_blocks(theta_prev)),
            ("revision_blocks", revisions.join("\n").trim_end()),
            ("label_options", &labels.join(", ")),
            ("max_words", &max_desc_words.to_string()),
        ],
    );
    Ok(PromptBundle {
        role_tag: RoleTag::Summary,
        system: SUMMARY_SYSTEM.trim_end().into(),
        user,
    })
}

/// Body of a `## Heading` section of a rendered prompt, up to the next
/// `## ` heading.
pub fn section<'a>(text: &'a str, heading: &str) -> Option<&'a str> {
    let start = text
        .match_indices(heading)
        .find(|(i, _)| *i == 0 || text.as_bytes()[i - 1] == b'\n')
        .map(|(i, _)| i + heading.len())?;
    let body = text[start..].strip_prefix('\n').unwrap_or(&text[start..]);
    let end = body.find("\n## ").unwrap_or(body.len());
    Some(body[..end].trim_end())
}

/// Canonical form for label comparison: case-folded, trimmed, with
/// spaces and hyphens mapped to underscores.
pub fn normalize_label(raw: &str) -> String {
    let trimmed = raw
        .trim()
        .trim_matches(|c: char| "*\"'`[]<>().,;:!".contains(c) || c.is_whitespace());
    let mut out = String::with_capacity(trimmed.len());
    for c in trimmed.chars() {
        let c = if c == ' ' || c == '-' { '_' } else { c };
        if c == '_' && out.ends_with('_') {
            continue;
        }
        out.extend(c.to_lowercase());
    }
    out
}

/// The label-set member `raw` normalizes to, if any.
pub fn match_label(raw: &str, labels: &[String]) -> Option<String> {
    let norm = normalize_label(raw);
    if norm.is_empty() {
        return None;
    }
    labels.iter().find(|l| normalize_label(l) == norm).cloned()
}

fn strip_markup(line: &str) -> &str {
    line.trim_start_matches(|c: char| c.is_whitespace() || "*#>-_".contains(c))
}

/// If `line` is a `<name>:` header (case-insensitive, markdown tolerated),
/// returns the text after the colon.
fn header_value<'a>(line: &'a str, names: &[&str]) -> Option<&'a str> {
    let stripped = strip_markup(line);
    let lower = stripped.to_ascii_lowercase();
    for name in names {
        if let Some(rest) = lower.strip_prefix(name) {
            let rest_trim = rest.trim_start_matches(['*', ' ']);
            if let Some(after) = rest_trim.strip_prefix(':') {
                let offset = stripped.len() - after.len();
                return Some(stripped[offset..].trim_start_matches(['*', ' ']));
            }
        }
    }
    None
}

const LABEL_HEADERS: &[&str] = &["label"];
const JUDGMENT_HEADERS: &[&str] = &["judgment", "judgement"];
const ANALYSIS_HEADERS: &[&str] = &["step-by-step analysis", "step by step analysis"];
const RATIONALE_HEADERS: &[&str] = &["rationale"];

pub fn parse_prediction(raw: &str, labels: &[String]) -> ParsedPrediction {
    #[derive(PartialEq)]
    enum Sec {
        None,
        Judgment,
        Analysis,
    }
    let mut label = None;
    let mut judgment = Vec::new();
    let mut analysis = Vec::new();
    let mut current = Sec::None;

    for line in raw.lines() {
        if let Some(v) = header_value(line, LABEL_HEADERS) {
            if let Some(l) = match_label(v, labels) {
                label = Some(l);
            }
            current = Sec::None;
        } else if let Some(v) = header_value(line, JUDGMENT_HEADERS) {
            current = Sec::Judgment;
            judgment.push(v);
        } else if let Some(v) = header_value(line, ANALYSIS_HEADERS) {
            current = Sec::Analysis;
            analysis.push(v);
        } else {
            match current {
                Sec::Judgment => judgment.push(line),
                Sec::Analysis => analysis.push(line),
                Sec::None => {}
            }
        }
    }

    let label = label
        .or_else(|| unique_label_in_tail(raw, labels))
        .map_or(PredictedLabel::Invalid, PredictedLabel::Label);
    ParsedPrediction {
        label,
        judgment: judgment.join("\n").trim().to_string(),
        analysis: analysis.join("\n").trim().to_string(),
        raw: raw.to_string(),
    }
}

/// The single label named in the last three non-empty lines, if exactly
/// one distinct label appears there.
fn unique_label_in_tail(raw: &str, labels: &[String]) -> Option<String> {
    let tail: Vec<&str> = raw.lines().filter(|l| !l.trim().is_empty()).collect();
    let tail = tail[tail.len().saturating_sub(3)..].join("\n");
    let mut hits = labels.iter().filter(|l| {
        contains_word(&tail, l) || (l.contains('_') && contains_word(&tail, &l.replace('_', " ")))
    });
    match (hits.next(), hits.next()) {
        (Some(only), None) => Some(only.clone()),
        _ => None,
    }
}

fn contains_word(haystack: &str, needle: &str) -> bool {
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    haystack.match_indices(needle).any(|(i, _)| {
        let before = haystack[..i].chars().next_back();
        let after = haystack[i + needle.len()..].chars().next();
        !before.is_some_and(is_word) && !after.is_some_and(is_word)
    })
}

/// A raw `[CLASS] <label>: <description>` block, label not yet matched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassBlock {
    pub label: String,
    pub description: String,
}

fn class_header(line: &str) -> Option<(&str, &str)> {
    let stripped = strip_markup(line);
    let rest = stripped
        .get(..7)
        .filter(|p| p.eq_ignore_ascii_case("[class]"))
        .map(|_| &stripped[7..])?;
    let colon = rest.find(':')?;
    Some((rest[..colon].trim(), &rest[colon + 1..]))
}

fn is_block_terminator(line: &str) -> bool {
    line.starts_with('#') || header_value(line, RATIONALE_HEADERS).is_some()
}

/// All class blocks in order of appearance. Each description is a trimmed
/// slice of `raw`, running until the next block, a `RATIONALE:` line or a
/// markdown heading.
pub fn parse_class_blocks(raw: &str) -> Vec<ClassBlock> {
    let mut blocks = Vec::new();
    let mut open: Option<(String, usize, usize)> = None;
    let mut offset = 0;
    for line in raw.split_inclusive('\n') {
        let content = line.trim_end_matches(['\n', '\r']);
        let header = class_header(content);
        if header.is_some() || is_block_terminator(content) {
            if let Some((label, start, end)) = open.take() {
                blocks.push(ClassBlock {
                    label,
                    description: raw[start..end].trim().to_string(),
                });
            }
        }
        if let Some((label, desc)) = header {
            let desc_start = offset + content.len() - desc.len();
            open = Some((label.to_string(), desc_start, offset + content.len()));
        } else if let Some((_, _, end)) = open.as_mut() {
            *end = offset + content.len();
        }
        offset += line.len();
    }
    if let Some((label, start, end)) = open {
        blocks.push(ClassBlock {
            label,
            description: raw[start..end].trim().to_string(),
        });
    }
    blocks
}

/// Prefix of `text` holding at most `max_words` whitespace-separated words.
pub fn truncate_words(text: &str, max_words: usize) -> &str {
    let mut words = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word && words == max_words {
                return text[..i].trim_end();
            }
            in_word = false;
        } else if !in_word {
            in_word = true;
            words += 1;
            if words > max_words {
                return text[..i].trim_end();
            }
        }
    }
    text
}

pub fn parse_theta_text(
    raw: &str,
    labels: &[String],
    max_desc_words: usize,
) -> Result<ParsedThetaText, PromptError> {
    let mut per_class = BTreeMap::new();
    for block in parse_class_blocks(raw) {
        let Some(label) = match_label(&block.label, labels) else {
            continue;
        };
        let desc = truncate_words(&block.description, max_desc_words);
        if desc.is_empty() {
            continue;
        }
        per_class.insert(label, desc.to_string());
    }
    if per_class.is_empty() {
        return Err(PromptError::NoClassBlocksFound);
    }
    Ok(ParsedThetaText {
        per_class,
        rationale: extract_rationale(raw),
        raw: raw.to_string(),
    })
}

fn extract_rationale(raw: &str) -> String {
    let mut lines = raw.lines();
    let mut collected = Vec::new();
    for line in lines.by_ref() {
        if let Some(v) = header_value(line, RATIONALE_HEADERS) {
            collected.push(v);
            break;
        }
    }
    for line in lines {
        if class_header(line).is_some() || line.starts_with("## ") {
            break;
        }
        collected.push(line);
    }
    if collected.is_empty() {
        // Fall back to any preamble before the first block.
        return raw
            .lines()
            .take_while(|l| class_header(l).is_none())
            .collect::<Vec<_>>()
            .join("\n")
            .trim()
            .to_string();
    }
    collected.join("\n").trim().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{ClassDescription, ThetaOrigin};
    use crate::graph::NodeId;
    use proptest::prelude::*;

    fn cora() -> Vec<String> {
        [
            "Case_Based",
            "Genetic_Algorithms",
            "Neural_Networks",
            "Probabilistic_Methods",
            "Reinforcement_Learning",
            "Rule_Learning",
            "Theory",
        ]
        .map(String::from)
        .to_vec()
    }

    fn theta(labels: &[String]) -> VerbalParameters {
        VerbalParameters {
            step: 3,
            origin: ThetaOrigin::Summarized,
            per_class: labels
                .iter()
                .map(|l| ClassDescription {
                    label: l.clone(),
                    description: format!("papers about {} topics", l.to_lowercase()),
                })
                .collect(),
        }
    }

    fn z(summary: Option<&str>) -> EnhancedRepresentation {
        EnhancedRepresentation {
            node_id: NodeId::new("n1"),
            own_text: "Evolving sensors in environments of controlled complexity.".into(),
            neighbor_summary: summary.map(str::to_string),
            hop_count: 1,
        }
    }

    #[test]
    fn fill_is_single_pass() {
        let out = fill("a {{x}} b {{y}}", &[("x", "{{y}}"), ("y", "Y")]);
        assert_eq!(out, "a {{y}} b Y");
    }

    #[test]
    fn enhancer_prompt_lists_neighbors() {
        let p = render_enhancer_prompt(&[
            NeighborInfo {
                text: "This paper firstly provides a rule induction method".into(),
                label: Some("Rule_Learning".into()),
            },
            NeighborInfo {
                text: "Genetic search for programs".into(),
                label: Some("Genetic_Algorithms".into()),
            },
        ]);
        assert_eq!(p.role_tag, RoleTag::Enhancer);
        assert!(p
            .user
            .contains("\"content\":\"This paper firstly provides a rule induction method\""));
        assert!(p.user.contains("\"category\":\"Genetic_Algorithms\""));
        assert!(p.user.contains("Please summarize the information above"));
        assert!(p.user.contains("ONLY your summary information"));
        assert!(p
            .user
            .contains("Please start with \"The papers cited in this essay\""));
        assert!(!p.user.contains(NO_NEIGHBORS_NOTICE));
    }

    #[test]
    fn enhancer_prompt_without_neighbors() {
        let p = render_enhancer_prompt(&[]);
        assert!(p.user.contains("no cited papers available"));
        assert!(!p.user.contains("[\n"));
        assert!(p.user.contains("Please summarize the information above"));
    }

    #[test]
    fn enhancer_neighbor_order_only_permutes_list() {
        let a = NeighborInfo {
            text: "alpha".into(),
            label: None,
        };
        let b = NeighborInfo {
            text: "beta".into(),
            label: Some("Theory".into()),
        };
        let p1 = render_enhancer_prompt(&[a.clone(), b.clone()]).user;
        let p2 = render_enhancer_prompt(&[b, a]).user;
        assert_ne!(p1, p2);
        // Only the trailing comma moves between records.
        fn strip(p: &str) -> Vec<&str> {
            p.lines().map(|l| l.trim_end_matches(',')).collect()
        }
        let (mut s1, mut s2) = (strip(&p1), strip(&p2));
        s1.sort();
        s2.sort();
        assert_eq!(s1, s2);
    }

    #[test]
    fn predictor_prompt_contains_everything() {
        let labels = cora();
        let t = theta(&labels);
        let p = render_predictor_prompt(
            &z(Some("The papers cited in this essay ...")),
            &t,
            &CoTMode::ZeroShot,
            &labels,
        )
        .unwrap();
        for c in &t.per_class {
            assert!(p
                .user
                .contains(&format!("[CLASS] {}: {}", c.label, c.description)));
        }
        assert!(p.user.contains(&labels.join(", ")));
        assert!(p.user.contains("Evolving sensors"));
        assert!(p.user.contains("The papers cited in this essay ..."));
        assert!(p.user.contains("Judgment:"));
        assert!(p.user.contains("Step-by-Step Analysis:"));
        assert!(p.user.contains("LABEL: <exactly one label"));
        assert!(!p.user.contains(SECTION_EXEMPLAR));
    }

    #[test]
    fn one_shot_differs_only_by_exemplar() {
        let labels = cora();
        let t = theta(&labels);
        let zero = render_predictor_prompt(&z(None), &t, &CoTMode::ZeroShot, &labels).unwrap();
        let mode = CoTMode::one_shot(DEFAULT_CORA_EXEMPLAR).unwrap();
        let one = render_predictor_prompt(&z(None), &t, &mode, &labels).unwrap();
        assert_eq!(zero.system, one.system);
        let block = exemplar_block(DEFAULT_CORA_EXEMPLAR);
        assert_eq!(one.user.strip_prefix(block.as_str()).unwrap(), zero.user);
        assert_eq!(CoTMode::one_shot("  "), Err(PromptError::EmptyExemplar));
    }

    #[test]
    fn placeholder_theta_instructs_text_matching() {
        let labels = cora();
        let blank = VerbalParameters::blank(&labels);
        let p = render_predictor_prompt(&z(None), &blank, &CoTMode::ZeroShot, &labels).unwrap();
        assert!(p.user.contains("judge from the paper text alone"));
        assert!(p.user.contains(NO_SUMMARY_NOTICE));
        let full = render_predictor_prompt(&z(None), &theta(&labels), &CoTMode::ZeroShot, &labels)
            .unwrap();
        assert!(!full.user.contains("judge from the paper text alone"));
    }

    #[test]
    fn predictor_requires_every_class() {
        let labels = cora();
        let mut t = theta(&labels);
        t.per_class.pop();
        assert_eq!(
            render_predictor_prompt(&z(None), &t, &CoTMode::ZeroShot, &labels),
            Err(PromptError::MissingClassDescription("Theory".into()))
        );
    }

    #[test]
    fn optimizer_variants() {
        let labels = cora();
        let t = theta(&labels);
        let wrong = render_optimizer_prompt(
            &z(None),
            "Reinforcement_Learning",
            &PredictedLabel::Label("Genetic_Algorithms".into()),
            &t,
            200,
        );
        assert!(wrong.user.contains("Revise the descriptions of the two classes involved, Reinforcement_Learning and Genetic_Algorithms"));
        assert!(wrong
            .user
            .contains("why the true class fits and the predicted class does not"));
        assert!(wrong
            .user
            .contains("True label: Reinforcement_Learning\nPredicted label: Genetic_Algorithms"));

        let right = render_optimizer_prompt(
            &z(None),
            "Theory",
            &PredictedLabel::Label("Theory".into()),
            &t,
            200,
        );
        assert!(right
            .user
            .contains("Reinforce the description of Theory only"));

        let invalid =
            render_optimizer_prompt(&z(None), "Theory", &PredictedLabel::Invalid, &t, 200);
        assert!(invalid.user.contains("could not be parsed"));
        assert!(invalid.user.contains("Predicted label: INVALID"));
        assert!(invalid.user.contains("Sharpen the description of Theory"));
        for c in &t.per_class {
            assert!(invalid.user.contains(&c.description));
        }
    }

    fn update(i: usize, revisions: &[(&str, &str)]) -> IntermediateUpdate {
        IntermediateUpdate {
            node_id: NodeId::new(format!("n{i}")),
            step: 1,
            per_class_revisions: revisions
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            rationale: format!("reason {i}"),
            was_correct: false,
        }
    }

    #[test]
    fn summary_prompt_lists_all_updates() {
        let labels = cora();
        let t = theta(&labels);
        let updates: Vec<_> = (0..8)
            .map(|i| update(i, &[("Theory", &format!("rev{i}"))]))
            .collect();
        let p = render_summary_prompt(&updates, &t, 200).unwrap();
        for i in 0..8 {
            assert!(p.user.contains(&format!("### Revision from node n{i}")));
            assert!(p.user.contains(&format!("[CLASS] Theory: rev{i}")));
        }
        assert!(p.user.contains(&format!(
            "Emit exactly one block for every label in: {}",
            labels.join(", ")
        )));
        assert!(p.user.contains("at most 200 words"));
        assert_eq!(
            render_summary_prompt(&[], &t, 200),
            Err(PromptError::EmptyBatchUpdates)
        );
    }

    #[test]
    fn summary_prompt_demands_all_labels_for_partial_updates() {
        let labels = cora();
        let t = theta(&labels);
        let p = render_summary_prompt(
            &[update(0, &[("Theory", "x"), ("Rule_Learning", "y")])],
            &t,
            200,
        )
        .unwrap();
        assert!(p.user.contains(&labels.join(", ")));
    }

    #[test]
    fn section_extraction() {
        let labels = cora();
        let p =
            render_predictor_prompt(&z(Some("S")), &theta(&labels), &CoTMode::ZeroShot, &labels)
                .unwrap();
        assert_eq!(section(&p.user, SECTION_PAPER).unwrap(), z(None).own_text);
        assert_eq!(section(&p.user, SECTION_NEIGHBORS).unwrap(), "S");
        assert_eq!(section(&p.user, SECTION_LABELS).unwrap(), labels.join(", "));
        assert!(section(&p.user, "## Nope").is_none());
    }

    #[test]
    fn label_normalization() {
        let labels = cora();
        assert_eq!(
            match_label("Rule Learning", &labels).as_deref(),
            Some("Rule_Learning")
        );
        assert_eq!(
            match_label(" **rule-learning** ", &labels).as_deref(),
            Some("Rule_Learning")
        );
        assert_eq!(match_label("THEORY.", &labels).as_deref(), Some("Theory"));
        assert_eq!(match_label("Astrology", &labels), None);
        assert_eq!(match_label("", &labels), None);
    }

    #[test]
    fn truncation_keeps_word_boundary() {
        let text: String = (0..300).map(|i| format!("w{i} ")).collect();
        let t = truncate_words(&text, 200);
        assert_eq!(t.split_whitespace().count(), 200);
        assert!(t.ends_with("w199"));
        assert!(text.starts_with(t));
        assert_eq!(truncate_words("a b", 5), "a b");
        assert_eq!(truncate_words("  a   b  c", 2), "  a   b");
    }

    #[test]
    fn class_block_descriptions_are_raw_slices() {
        let raw = "intro\n[CLASS] Theory: proofs\n and bounds\n[CLASS] Rule_Learning: rules\nRATIONALE: because";
        let blocks = parse_class_blocks(raw);
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].description, "proofs\n and bounds");
        assert!(raw.contains(&blocks[0].description));
        let parsed = parse_theta_text(raw, &cora(), 200).unwrap();
        assert_eq!(parsed.rationale, "because");
    }

    fn label_strategy() -> impl Strategy<Value = usize> {
        0usize..7
    }

    proptest! {
        #[test]
        fn compliant_completion_round_trips(idx in label_strategy(), judgment in "[a-z ]{0,40}", space_form in any::<bool>()) {
            let labels = cora();
            let label = &labels[idx];
            let shown = if space_form { label.replace('_', " ") } else { label.clone() };
            let raw = format!("Judgment: {judgment}\nStep-by-Step Analysis:\n1. thinking\nLABEL: {shown}");
            let parsed = parse_prediction(&raw, &labels);
            prop_assert_eq!(parsed.label, PredictedLabel::Label(label.clone()));
        }

        #[test]
        fn theta_parse_stays_in_bounds(raw in "(\\[CLASS\\] [A-Za-z_ ]{1,25}: [a-z ]{0,80}\n|[a-z :]{0,30}\n){1,12}", max in 1usize..12) {
            let labels = cora();
            if let Ok(parsed) = parse_theta_text(&raw, &labels, max) {
                for (k, v) in &parsed.per_class {
                    prop_assert!(labels.contains(k));
                    prop_assert!(v.split_whitespace().count() <= max);
                    prop_assert!(raw.contains(v.as_str()));
                }
            }
        }

        #[test]
        fn rendering_is_deterministic(text in "[a-zA-Z ,.]{1,80}") {
            let labels = cora();
            let mut rep = z(Some(&text));
            rep.own_text = text.clone();
            let a = render_predictor_prompt(&rep, &theta(&labels), &CoTMode::ZeroShot, &labels).unwrap();
            let b = render_predictor_prompt(&rep, &theta(&labels), &CoTMode::ZeroShot, &labels).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
