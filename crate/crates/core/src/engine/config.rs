use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::graph::{self, DatasetFormat, TextAttributedGraph};
use crate::llm::BackendConfig;
use crate::prompting::{CoTMode, RoleTag, DEFAULT_CORA_EXEMPLAR, DEFAULT_MAX_DESC_WORDS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    NoOptimizer,
    NoSummary,
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "no-optimizer" => Ok(Self::NoOptimizer),
            "no-summary" => Ok(Self::NoSummary),
            other => Err(format!("unknown ablation `{other}`")),
        }
    }
}

/// Which nodes the optimizer sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerPolicy {
    #[default]
    AllNodes,
    ErrorsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CotKind {
    #[default]
    ZeroShot,
    OneShot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub labels: PathBuf,
    pub test_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("dataset.jsonl"),
            labels: PathBuf::from("labels.txt"),
            test_size: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub split: u64,
    pub batch: u64,
}

/// Everything a run depends on. Loaded from TOML; relative paths resolve
/// against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub batch_size: usize,
    pub temperature: f64,
    pub hop_count: usize,
    pub cot: CotKind,
    /// One-shot exemplar file; the shipped Cora exemplar when absent.
    pub exemplar: Option<PathBuf>,
    pub prior: Option<PathBuf>,
    pub num_steps: usize,
    pub eval_every: usize,
    pub ablation: Ablation,
    pub node_only: bool,
    pub optimizer_policy: OptimizerPolicy,
    pub max_desc_words: usize,
    pub seeds: Seeds,
    /// Backend used by every role without an override.
    pub backend: BackendConfig,
    pub roles: BTreeMap<RoleTag, BackendConfig>,
    pub output_dir: PathBuf,
    /// Stop after this step (for staged runs); not part of the digest.
    #[serde(skip)]
    pub stop_after: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            batch_size: 8,
            temperature: crate::llm::DEFAULT_TEMPERATURE,
            hop_count: 1,
            cot: CotKind::ZeroShot,
            exemplar: None,
            prior: None,
            num_steps: 80,
            eval_every: 5,
            ablation: Ablation::None,
            node_only: false,
            optimizer_policy: OptimizerPolicy::AllNodes,
            max_desc_words: DEFAULT_MAX_DESC_WORDS,
            seeds: Seeds::default(),
            backend: BackendConfig::default(),
            roles: BTreeMap::new(),
            output_dir: PathBuf::from("run"),
            stop_after: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, EngineError> {
        let mut config: RunConfig =
            toml::from_str(text).map_err(|e| EngineError::Config(e.to_string()))?;
        config.resolve_paths(base_dir);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let text = std::fs::read_to_string(path).map_err(EngineError::io(path))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.path);
        fix(&mut self.dataset.labels);
        fix(&mut self.output_dir);
        let scripts = self.roles.values_mut().map(|b| &mut b.script);
        for p in [
            &mut self.exemplar,
            &mut self.prior,
            &mut self.backend.script,
        ]
        .into_iter()
        .chain(scripts)
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let fail = |m: &str| Err(EngineError::Config(m.into()));
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if self.eval_every == 0 {
            return fail("eval_every must be >= 1");
        }
        if self.num_steps == 0 {
            return fail("num_steps must be >= 1");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return fail("temperature must lie in [0, 2]");
        }
        if self.max_desc_words == 0 {
            return fail("max_desc_words must be >= 1");
        }
        for role in RoleTag::ALL {
            self.backend_for(role)
                .validate()
                .map_err(|e| EngineError::Config(format!("{} backend: {e}", role.as_str())))?;
        }
        Ok(())
    }

    pub fn backend_for(&self, role: RoleTag) -> &BackendConfig {
        self.roles.get(&role).unwrap_or(&self.backend)
    }

    /// Points every role at one scripted backend file.
    pub fn use_script(&mut self, script: &Path) {
        self.backend = BackendConfig::scripted(script);
        self.roles.clear();
    }

    pub fn cot_mode(&self) -> Result<CoTMode, EngineError> {
        match self.cot {
            CotKind::ZeroShot => Ok(CoTMode::ZeroShot),
            CotKind::OneShot => {
                let text = match &self.exemplar {
                    Some(p) => std::fs::read_to_string(p).map_err(EngineError::io(p))?,
                    None => DEFAULT_CORA_EXEMPLAR.to_string(),
                };
                Ok(CoTMode::one_shot(text)?)
            }
        }
    }

    /// Effective neighborhood radius: zero when the enhancer is disabled.
    pub fn effective_hops(&self) -> usize {
        if self.node_only {
            0
        } else {
            self.hop_count
        }
    }

    /// Hash of every field that influences results. Output location,
    /// staging and secrets are excluded.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config always serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Loads the dataset and applies the seeded split.
    pub fn prepare_graph(&self) -> Result<TextAttributedGraph, EngineError> {
        let labels = graph::load_labels(&self.dataset.labels)?;
        let mut g = graph::load_graph(&self.dataset.path, labels, DatasetFormat::JsonLines)?;
        g.make_split(self.dataset.test_size, self.seeds.split)?;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.temperature, 0.1);
        assert_eq!(c.hop_count, 1);
        assert_eq!(c.num_steps, 80);
        assert_eq!(c.eval_every, 5);
        assert_eq!(c.dataset.test_size, 40);
        assert_eq!(c.max_desc_words, 200);
    }

    #[test]
    fn parse_resolves_relative_paths() {
        let text = r#"
num_steps = 10
ablation = "no-summary"
optimizer_policy = "errors-only"

[dataset]
path = "data/g.jsonl"
labels = "data/labels.txt"

[backend]
kind = "scripted"
script = "mock.toml"

[roles.predictor]
kind = "http"
base_url = "http://localhost:8000/v1"
"#;
        let c = RunConfig::from_toml_str(text, Path::new("/cfg")).unwrap();
        assert_eq!(c.dataset.path, Path::new("/cfg/data/g.jsonl"));
        assert_eq!(
            c.backend.script.as_deref(),
            Some(Path::new("/cfg/mock.toml"))
        );
        assert_eq!(c.ablation, Ablation::NoSummary);
        assert_eq!(c.optimizer_policy, OptimizerPolicy::ErrorsOnly);
        assert_eq!(
            c.backend_for(RoleTag::Predictor).kind,
            crate::llm::BackendKind::Http
        );
        assert_eq!(
            c.backend_for(RoleTag::Summary).kind,
            crate::llm::BackendKind::Scripted
        );
    }

    #[test]
    fn unknown_fields_and_bad_values_rejected() {
        assert!(RunConfig::from_toml_str("bogus = 1\n", Path::new("/")).is_err());
        let mut c = RunConfig::default();
        c.use_script(Path::new("/s.toml"));
        assert!(c.validate().is_ok());
        c.eval_every = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn digest_ignores_output_dir_and_staging() {
        let mut a = RunConfig::default();
        a.use_script(Path::new("/s.toml"));
        let mut b = a.clone();
        b.output_dir = PathBuf::from("/elsewhere");
        b.stop_after = Some(5);
        assert_eq!(a.digest(), b.digest());
        b.num_steps = 81;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.use_script(Path::new("/s.toml"));
        c.prior = Some(PathBuf::from("/p.txt"));
        c.resolve_paths(Path::new("/"));
        let back = RunConfig::from_toml_str(&c.to_toml(), Path::new("/")).unwrap();
        assert_eq!(back, c);
    }
}
