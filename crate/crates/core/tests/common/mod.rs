#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vgrl_core::engine::{Ablation, Clients, DatasetConfig, RunConfig, Seeds};
use vgrl_core::llm::{BackendConfig, ChatBackend, ChatRequest, ChatResponse, LlmError};

pub const LABELS: [&str; 7] = [
    "Case_Based",
    "Genetic_Algorithms",
    "Neural_Networks",
    "Probabilistic_Methods",
    "Reinforcement_Learning",
    "Rule_Learning",
    "Theory",
];

pub const KEYWORDS: [&str; 7] = [
    "anchorite",
    "bellwether",
    "cobblestone",
    "dulcimer",
    "epiphyte",
    "filigree",
    "gossamer",
];

// Must not share words with the blank placeholder description.
const FILLER: [&str; 24] = [
    "we",
    "study",
    "a",
    "graph",
    "method",
    "with",
    "strong",
    "results",
    "on",
    "benchmark",
    "data",
    "and",
    "propose",
    "simple",
    "framework",
    "for",
    "analysis",
    "of",
    "learning",
    "systems",
    "evaluated",
    "across",
    "several",
    "tasks",
];

pub const NUM_NODES: usize = 110;
pub const TEST_SIZE: usize = 40;

pub fn labels() -> Vec<String> {
    LABELS.iter().map(|s| s.to_string()).collect()
}

pub fn keyword_of(label: &str) -> &'static str {
    KEYWORDS[LABELS
        .iter()
        .position(|l| *l == label)
        .expect("known label")]
}

/// Writes a homophilous 7-class graph with one planted keyword per class.
/// Returns (dataset, labels) paths.
pub fn write_fixture(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class = |i: usize| i % LABELS.len();
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); NUM_NODES];
    for i in 0..NUM_NODES {
        let same: Vec<usize> = (0..NUM_NODES)
            .filter(|&j| j != i && class(j) == class(i))
            .collect();
        for &j in same.choose_multiple(&mut rng, 2) {
            adj[i].insert(j);
            adj[j].insert(i);
        }
        if rng.gen_bool(0.15) {
            let j = rng.gen_range(0..NUM_NODES);
            if class(j) != class(i) {
                adj[i].insert(j);
                adj[j].insert(i);
            }
        }
    }
    let data = dir.join("graph.jsonl");
    let mut f = std::fs::File::create(&data).unwrap();
    for i in 0..NUM_NODES {
        let mut words: Vec<&str> = (0..10).map(|_| *FILLER.choose(&mut rng).unwrap()).collect();
        let at = rng.gen_range(0..=words.len());
        words.insert(at, KEYWORDS[class(i)]);
        let record = serde_json::json!({
            "id": format!("p{i:03}"),
            "text": words.join(" "),
            "label": LABELS[class(i)],
            "neighbors": adj[i].iter().map(|j| format!("p{j:03}")).collect::<Vec<_>>(),
        });
        writeln!(f, "{record}").unwrap();
    }
    let labels = dir.join("labels.txt");
    std::fs::write(&labels, LABELS.join("\n") + "\n").unwrap();
    (data, labels)
}

pub fn hermetic_config(data: &Path, labels: &Path, out: &Path, ablation: Ablation) -> RunConfig {
    RunConfig {
        dataset: DatasetConfig {
            path: data.to_path_buf(),
            labels: labels.to_path_buf(),
            test_size: TEST_SIZE,
        },
        num_steps: 10,
        eval_every: 5,
        batch_size: 8,
        seeds: Seeds {
            split: 7,
            batch: 11,
        },
        ablation,
        // Clients are supplied in-process; the script path is never opened.
        backend: BackendConfig::scripted("in-process"),
        output_dir: out.to_path_buf(),
        ..RunConfig::default()
    }
}

/// Body of a `## heading` section of a prompt.
pub fn section<'a>(prompt: &'a str, heading: &str) -> &'a str {
    let marker = format!("{heading}\n");
    let Some(i) = prompt.find(&marker) else {
        return "";
    };
    let body = &prompt[i + marker.len()..];
    &body[..body.find("\n## ").unwrap_or(body.len())]
}

pub fn word_set(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// `[CLASS] label: description` lines, single-line form.
pub fn class_lines(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.strip_prefix("[CLASS] "))
        .filter_map(|l| l.split_once(':'))
        .map(|(l, d)| (l.trim().to_string(), d.trim().to_string()))
        .collect()
}

/// Keyword-oracle chat model covering all four roles.
pub struct MockLlm {
    pub calls: AtomicUsize,
    /// Fail every call once this many calls have succeeded.
    pub fail_after: Option<usize>,
    pub concurrency: usize,
}

impl MockLlm {
    pub fn new() -> Self {
        Self {
            calls: AtomicUsize::new(0),
            fail_after: None,
            concurrency: 4,
        }
    }

    pub fn failing_after(n: usize) -> Self {
        Self {
            fail_after: Some(n),
            ..Self::new()
        }
    }

    pub fn clients(self) -> Clients {
        Clients::uniform(Arc::new(self))
    }

    fn reply(prompt: &str) -> String {
        if prompt.contains("You are the ENHANCER") {
            let n = prompt.matches("\"content\"").count();
            format!("The papers cited in this essay are {n} related works.")
        } else if prompt.contains("You are the PREDICTOR") {
            predict(prompt)
        } else if prompt.contains("You are the OPTIMIZER") {
            optimize(prompt)
        } else if prompt.contains("You are the SUMMARY") {
            summarize(prompt)
        } else {
            panic!("unrecognized role prompt")
        }
    }
}

fn predict(prompt: &str) -> String {
    let paper = word_set(section(prompt, "## Paper"));
    let options: Vec<&str> = section(prompt, "## Label options")
        .split(',')
        .map(str::trim)
        .collect();
    let descs: BTreeMap<String, String> = class_lines(section(prompt, "## Class descriptions"))
        .into_iter()
        .collect();
    let mut best = (options[0], 0);
    for label in &options {
        let score = descs
            .get(*label)
            .map_or(0, |d| word_set(d).intersection(&paper).count());
        if score > best.1 {
            best = (label, score);
        }
    }
    format!(
        "Judgment: {0} overlaps most.\nStep-by-Step Analysis: counted shared words.\nLABEL: {0}",
        best.0
    )
}

fn optimize(prompt: &str) -> String {
    let outcome = section(prompt, "## Prediction outcome");
    let field = |name: &str| {
        outcome
            .lines()
            .find_map(|l| l.strip_prefix(name))
            .unwrap_or_default()
            .trim()
            .to_string()
    };
    let (truth, predicted) = (field("True label:"), field("Predicted label:"));
    if truth == predicted {
        return "The prediction is right; nothing to revise.".into();
    }
    format!(
        "[CLASS] {truth}: {}\nRATIONALE: the planted word marks {truth}.",
        keyword_of(&truth)
    )
}

fn summarize(prompt: &str) -> String {
    let current = class_lines(section(prompt, "## Current class descriptions"));
    let revisions = class_lines(section(prompt, "## Proposed revisions"));
    let mut out = String::new();
    for (label, desc) in &current {
        let mut merged: Vec<&str> = Vec::new();
        let extra = revisions
            .iter()
            .filter(|(l, _)| l == label)
            .map(|(_, d)| d.as_str());
        for w in std::iter::once(desc.as_str())
            .chain(extra)
            .flat_map(str::split_whitespace)
        {
            if !merged.contains(&w) && merged.len() < 200 {
                merged.push(w);
            }
        }
        out.push_str(&format!("[CLASS] {label}: {}\n", merged.join(" ")));
    }
    out + "RATIONALE: merged keywords."
}

impl ChatBackend for MockLlm {
    fn id(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_after.is_some_and(|limit| n >= limit) {
            return Err(LlmError::Timeout { attempts: 3 });
        }
        Ok(ChatResponse {
            text: Self::reply(&request.rendered()),
            backend_id: "mock".into(),
            latency_ms: 0,
        })
    }

    fn max_concurrency(&self) -> usize {
        self.concurrency
    }
}

/// Every regular file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(dir)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}
