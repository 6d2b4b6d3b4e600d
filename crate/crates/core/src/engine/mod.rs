//! The optimization loop: enhance, predict, optimize and summarize over
//! mini-batches, publishing a new version of the class descriptions per
//! step.

pub mod audit;
mod checkpoint;
mod config;
mod theta;
mod transcript;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use config::{Ablation, CotKind, DatasetConfig, OptimizerPolicy, RunConfig, Seeds};
pub use theta::{
    init_theta, ClassDescription, EnhancedRepresentation, IntermediateUpdate, ThetaOrigin,
    VerbalParameters, BLANK_DESCRIPTION,
};
pub use transcript::{flags, read_transcript, Exchange, Phase, Transcript, TranscriptEntry};

use crate::eval::{self, ConfusionMatrix, EvalError, MetricsRecord};
use crate::graph::{make_batches, GraphError, MiniBatch, NodeId, Split, TextAttributedGraph};
use crate::llm::{self, ChatBackend, ChatRequest, LlmError};
use crate::prompting::{
    self, CoTMode, NeighborInfo, PredictedLabel, PromptBundle, PromptError, RoleTag,
    TEMPLATE_VERSION,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("prior file has no description for class `{0}`")]
    PriorMissingClass(String),
    #[error("prior file describes unknown class `{0}`")]
    PriorUnknownClass(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint was produced by config {found}, current config is {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error("step {step} aborted; last checkpoint: {}: {source}", checkpoint.display())]
    Aborted {
        step: usize,
        checkpoint: PathBuf,
        #[source]
        source: Box<EngineError>,
    },
}

impl EngineError {
    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
        move |source| EngineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// A backend bound to the request parameters of one role.
#[derive(Clone)]
pub struct RoleClient {
    pub backend: Arc<dyn ChatBackend>,
    pub model: String,
    pub max_tokens: u32,
}

impl RoleClient {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            model: "scripted".into(),
            max_tokens: llm::DEFAULT_MAX_TOKENS,
        }
    }
}

/// One client per role.
#[derive(Clone)]
pub struct Clients {
    pub enhancer: RoleClient,
    pub predictor: RoleClient,
    pub optimizer: RoleClient,
    pub summary: RoleClient,
}

impl Clients {
    pub fn connect(config: &RunConfig) -> Result<Self, LlmError> {
        let mk = |role| -> Result<RoleClient, LlmError> {
            let cfg = config.backend_for(role);
            Ok(RoleClient {
                backend: llm::connect(cfg)?,
                model: cfg.model.clone(),
                max_tokens: cfg.max_tokens,
            })
        };
        Ok(Self {
            enhancer: mk(RoleTag::Enhancer)?,
            predictor: mk(RoleTag::Predictor)?,
            optimizer: mk(RoleTag::Optimizer)?,
            summary: mk(RoleTag::Summary)?,
        })
    }

    pub fn uniform(backend: Arc<dyn ChatBackend>) -> Self {
        let c = RoleClient::new(backend);
        Self {
            enhancer: c.clone(),
            predictor: c.clone(),
            optimizer: c.clone(),
            summary: c,
        }
    }

    pub fn per_role(
        enhancer: Arc<dyn ChatBackend>,
        predictor: Arc<dyn ChatBackend>,
        optimizer: Arc<dyn ChatBackend>,
        summary: Arc<dyn ChatBackend>,
    ) -> Self {
        Self {
            enhancer: RoleClient::new(enhancer),
            predictor: RoleClient::new(predictor),
            optimizer: RoleClient::new(optimizer),
            summary: RoleClient::new(summary),
        }
    }

    pub fn role(&self, role: RoleTag) -> &RoleClient {
        match role {
            RoleTag::Enhancer => &self.enhancer,
            RoleTag::Predictor => &self.predictor,
            RoleTag::Optimizer => &self.optimizer,
            RoleTag::Summary => &self.summary,
        }
    }

    fn workers(&self) -> usize {
        [&self.enhancer, &self.predictor, &self.optimizer]
            .iter()
            .map(|c| c.backend.max_concurrency())
            .min()
            .unwrap_or(1)
            .max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub node_id: NodeId,
    pub label: PredictedLabel,
    pub judgment: String,
    pub analysis: String,
    /// Completion the label was parsed from.
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeOutcome {
    pub node_id: NodeId,
    pub truth: String,
    pub predicted: PredictedLabel,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub enhancer: usize,
    pub predictor: usize,
    pub optimizer: usize,
    pub summary: usize,
}

impl CallCounts {
    fn tally(exchanges: &[Exchange]) -> Self {
        let mut c = Self::default();
        for ex in exchanges.iter().filter(|e| e.completion.is_some()) {
            match ex.role {
                RoleTag::Enhancer => c.enhancer += 1,
                RoleTag::Predictor => c.predictor += 1,
                RoleTag::Optimizer => c.optimizer += 1,
                RoleTag::Summary => c.summary += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub step: usize,
    pub predictions: Vec<NodeOutcome>,
    pub batch_accuracy: f64,
    pub updates: Vec<IntermediateUpdate>,
    pub calls: CallCounts,
}

/// Shared state of a run: config, graph, clients, transcript and the
/// test-node enhancer cache.
pub struct Session<'a> {
    config: &'a RunConfig,
    graph: &'a TextAttributedGraph,
    clients: &'a Clients,
    cot: CoTMode,
    workers: usize,
    pub transcript: Transcript,
    pub(crate) enhancer_cache: BTreeMap<String, Option<String>>,
}

impl<'a> Session<'a> {
    pub fn new(
        config: &'a RunConfig,
        graph: &'a TextAttributedGraph,
        clients: &'a Clients,
        transcript: Transcript,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        Ok(Self {
            cot: config.cot_mode()?,
            workers: clients.workers(),
            config,
            graph,
            clients,
            transcript,
            enhancer_cache: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        self.config
    }

    pub fn graph(&self) -> &TextAttributedGraph {
        self.graph
    }

    pub fn labels(&self) -> &[String] {
        self.graph.labels()
    }

    fn ask(
        &self,
        bundle: &PromptBundle,
        node: Option<&NodeId>,
        attempt: u32,
        log: &mut Vec<Exchange>,
    ) -> Result<String, LlmError> {
        let client = self.clients.role(bundle.role_tag);
        let mut request = ChatRequest::new(client.model.clone(), bundle.messages());
        request.temperature = self.config.temperature;
        request.max_tokens = client.max_tokens;
        let response = client.backend.complete(&request)?;
        log.push(Exchange {
            role: bundle.role_tag,
            node: node.cloned(),
            attempt,
            messages: request.messages,
            completion: Some(response.text.clone()),
            flag: None,
        });
        Ok(response.text)
    }

    fn flag_last(log: &mut [Exchange], flag: &'static str) {
        if let Some(last) = log.last_mut() {
            last.flag = Some(flag);
        }
    }

    /// Verbalizes the node's neighborhood. No call is made in node-only
    /// mode or when the node has no neighbors within range.
    pub fn enhance(
        &self,
        node: usize,
        log: &mut Vec<Exchange>,
    ) -> Result<EnhancedRepresentation, LlmError> {
        let record = self.graph.node(node);
        let hops = self.config.effective_hops();
        let neighborhood = if hops == 0 {
            Vec::new()
        } else {
            self.graph.neighborhood_within(node, hops)
        };
        let neighbor_summary = if neighborhood.is_empty() {
            None
        } else {
            let infos: Vec<NeighborInfo> = neighborhood
                .iter()
                .map(|&j| {
                    let n = self.graph.node(j);
                    // Only training labels are visible; test labels stay hidden.
                    NeighborInfo {
                        text: n.text.clone(),
                        label: n
                            .label
                            .clone()
                            .filter(|_| n.split == Some(Split::LabeledTrain)),
                    }
                })
                .collect();
            let bundle = prompting::render_enhancer_prompt(&infos);
            Some(self.ask(&bundle, Some(&record.id), 1, log)?)
        };
        Ok(EnhancedRepresentation {
            node_id: record.id.clone(),
            own_text: record.text.clone(),
            neighbor_summary,
            hop_count: hops,
        })
    }

    /// One predictor call, plus one stricter retry when the answer has no
    /// usable label.
    pub fn predict(
        &self,
        z: &EnhancedRepresentation,
        theta: &VerbalParameters,
        log: &mut Vec<Exchange>,
    ) -> Result<PredictionRecord, EngineError> {
        let labels = self.labels();
        let bundle = prompting::render_predictor_prompt(z, theta, &self.cot, labels)?;
        let raw = self.ask(&bundle, Some(&z.node_id), 1, log)?;
        let mut parsed = prompting::parse_prediction(&raw, labels);
        if parsed.label == PredictedLabel::Invalid {
            Self::flag_last(log, flags::PARSE_RETRY);
            let strict = prompting::with_label_only_suffix(&bundle, labels);
            let raw = self.ask(&strict, Some(&z.node_id), 2, log)?;
            let retry = prompting::parse_prediction(&raw, labels);
            if retry.label == PredictedLabel::Invalid {
                Self::flag_last(log, flags::INVALID_PREDICTION);
            }
            parsed = retry;
        }
        Ok(PredictionRecord {
            node_id: z.node_id.clone(),
            label: parsed.label,
            judgment: parsed.judgment,
            analysis: parsed.analysis,
            raw: parsed.raw,
        })
    }

    pub fn optimize(
        &self,
        z: &EnhancedRepresentation,
        y_true: &str,
        prediction: &PredictionRecord,
        theta_prev: &VerbalParameters,
        step: usize,
        log: &mut Vec<Exchange>,
    ) -> Result<IntermediateUpdate, LlmError> {
        let was_correct = prediction.label.matches(y_true);
        let mut update = IntermediateUpdate {
            node_id: z.node_id.clone(),
            step,
            per_class_revisions: BTreeMap::new(),
            rationale: String::new(),
            was_correct,
        };
        if was_correct && self.config.optimizer_policy == OptimizerPolicy::ErrorsOnly {
            log.push(Exchange::event(
                RoleTag::Optimizer,
                Some(z.node_id.clone()),
                flags::SKIPPED_CORRECT,
            ));
            return Ok(update);
        }
        let bundle = prompting::render_optimizer_prompt(
            z,
            y_true,
            &prediction.label,
            theta_prev,
            self.config.max_desc_words,
        );
        let raw = self.ask(&bundle, Some(&z.node_id), 1, log)?;
        match prompting::parse_theta_text(&raw, self.labels(), self.config.max_desc_words) {
            Ok(parsed) => {
                update.per_class_revisions = parsed.per_class;
                update.rationale = parsed.rationale;
            }
            Err(_) => Self::flag_last(log, flags::NO_CLASS_BLOCKS),
        }
        Ok(update)
    }

    /// Consolidates the batch's updates into the next version. Classes the
    /// summary omits keep their previous description.
    pub fn summarize(
        &self,
        updates: &[IntermediateUpdate],
        theta_prev: &VerbalParameters,
        log: &mut Vec<Exchange>,
    ) -> Result<VerbalParameters, EngineError> {
        if updates.iter().all(IntermediateUpdate::is_empty) {
            return Ok(theta_prev.next(theta_prev.origin, theta_prev.per_class.clone()));
        }
        let bundle =
            prompting::render_summary_prompt(updates, theta_prev, self.config.max_desc_words)?;
        let raw = self.ask(&bundle, None, 1, log)?;
        match prompting::parse_theta_text(&raw, self.labels(), self.config.max_desc_words) {
            Ok(parsed) => {
                let per_class = theta_prev
                    .per_class
                    .iter()
                    .map(|c| ClassDescription {
                        label: c.label.clone(),
                        description: parsed
                            .per_class
                            .get(&c.label)
                            .cloned()
                            .unwrap_or_else(|| c.description.clone()),
                    })
                    .collect();
                Ok(theta_prev.next(ThetaOrigin::Summarized, per_class))
            }
            Err(_) => {
                Self::flag_last(log, flags::NO_CLASS_BLOCKS);
                Ok(theta_prev.next(theta_prev.origin, theta_prev.per_class.clone()))
            }
        }
    }

    /// Runs `f` over `items`, concurrently when the backends allow it.
    /// Results and their transcript fragments come back in input order.
    fn map_nodes<T: Send>(
        &self,
        items: &[usize],
        f: impl Fn(usize, &mut Vec<Exchange>) -> Result<T, EngineError> + Sync,
    ) -> Result<Vec<(T, Vec<Exchange>)>, EngineError> {
        let run_one = |i: usize| {
            let mut log = Vec::new();
            f(i, &mut log).map(|t| (t, log))
        };
        if self.workers <= 1 || items.len() <= 1 {
            return items.iter().map(|&i| run_one(i)).collect();
        }
        let workers = self.workers.min(items.len());
        type Slot<T> = Option<Result<(T, Vec<Exchange>), EngineError>>;
        let mut slots: Vec<Slot<T>> = (0..items.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let run_one = &run_one;
                    s.spawn(move || {
                        (w..items.len())
                            .step_by(workers)
                            .map(|pos| (pos, run_one(items[pos])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (pos, r) in h.join().expect("worker panicked") {
                    slots[pos] = Some(r);
                }
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("every slot filled"))
            .collect()
    }

    /// One optimization step over `batch`. The transcript is only extended
    /// when the whole step succeeds.
    pub fn run_step(
        &mut self,
        batch: &MiniBatch,
        theta_prev: &VerbalParameters,
    ) -> Result<(VerbalParameters, StepResult), EngineError> {
        let step = theta_prev.step + 1;
        let nodes: Vec<usize> = batch
            .node_ids
            .iter()
            .map(|id| self.graph.index_of(id))
            .collect::<Result<_, _>>()?;
        let ablation = self.config.ablation;

        let per_node = self.map_nodes(&nodes, |idx, log| {
            let truth = self.graph.node(idx).label.clone().ok_or_else(|| {
                EngineError::Config(format!(
                    "batch node {} has no label",
                    self.graph.node(idx).id
                ))
            })?;
            let z = self.enhance(idx, log)?;
            let prediction = self.predict(&z, theta_prev, log)?;
            let update = match ablation {
                Ablation::NoOptimizer => None,
                _ => Some(self.optimize(&z, &truth, &prediction, theta_prev, step, log)?),
            };
            Ok((truth, prediction, update))
        })?;

        let mut log = Vec::new();
        let mut predictions = Vec::with_capacity(per_node.len());
        let mut updates = Vec::new();
        for ((truth, prediction, update), fragment) in per_node {
            log.extend(fragment);
            predictions.push(NodeOutcome {
                node_id: prediction.node_id,
                truth,
                predicted: prediction.label,
            });
            updates.extend(update);
        }

        let theta_next = match ablation {
            Ablation::None => self.summarize(&updates, theta_prev, &mut log)?,
            Ablation::NoOptimizer => {
                theta_prev.next(theta_prev.origin, theta_prev.per_class.clone())
            }
            Ablation::NoSummary => concat_updates(theta_prev, &updates, self.config.max_desc_words),
        };

        let correct = predictions
            .iter()
            .filter(|p| p.predicted.matches(&p.truth))
            .count();
        let result = StepResult {
            step,
            batch_accuracy: correct as f64 / predictions.len().max(1) as f64,
            predictions,
            updates,
            calls: CallCounts::tally(&log),
        };
        self.transcript.commit(step, Phase::Train, log);
        Ok((theta_next, result))
    }

    fn cache_key(&self, node: &NodeId) -> String {
        format!(
            "{}|{}|{}",
            node,
            self.config.effective_hops(),
            TEMPLATE_VERSION
        )
    }

    /// Enhanced representations for `nodes`, computing and caching any that
    /// are missing. Exchanges are committed under `step`.
    pub(crate) fn cached_representations(
        &mut self,
        nodes: &[usize],
        step: usize,
    ) -> Result<Vec<EnhancedRepresentation>, EngineError> {
        let missing: Vec<usize> = nodes
            .iter()
            .copied()
            .filter(|&i| {
                !self
                    .enhancer_cache
                    .contains_key(&self.cache_key(&self.graph.node(i).id))
            })
            .collect();
        let computed = self.map_nodes(&missing, |idx, log| Ok(self.enhance(idx, log)?))?;
        let mut log = Vec::new();
        for (z, fragment) in computed {
            log.extend(fragment);
            let key = self.cache_key(&z.node_id);
            self.enhancer_cache.insert(key, z.neighbor_summary);
        }
        self.transcript.commit(step, Phase::Eval, log);
        let hops = self.config.effective_hops();
        Ok(nodes
            .iter()
            .map(|&i| {
                let record = self.graph.node(i);
                EnhancedRepresentation {
                    node_id: record.id.clone(),
                    own_text: record.text.clone(),
                    neighbor_summary: self.enhancer_cache[&self.cache_key(&record.id)].clone(),
                    hop_count: hops,
                }
            })
            .collect())
    }

    pub(crate) fn predict_all(
        &mut self,
        reps: &[EnhancedRepresentation],
        theta: &VerbalParameters,
        step: usize,
    ) -> Result<Vec<PredictionRecord>, EngineError> {
        let positions: Vec<usize> = (0..reps.len()).collect();
        let results =
            self.map_nodes(&positions, |pos, log| self.predict(&reps[pos], theta, log))?;
        let mut log = Vec::new();
        let mut out = Vec::with_capacity(results.len());
        for (p, fragment) in results {
            log.extend(fragment);
            out.push(p);
        }
        self.transcript.commit(step, Phase::Eval, log);
        Ok(out)
    }
}

/// Next version under the no-summary ablation: each class's previous
/// description followed by every revision for it, in batch order,
/// space-joined and truncated.
pub fn concat_updates(
    theta_prev: &VerbalParameters,
    updates: &[IntermediateUpdate],
    max_desc_words: usize,
) -> VerbalParameters {
    let mut changed = false;
    let per_class = theta_prev
        .per_class
        .iter()
        .map(|c| {
            let revisions: Vec<&str> = updates
                .iter()
                .filter_map(|u| u.per_class_revisions.get(&c.label).map(String::as_str))
                .collect();
            if revisions.is_empty() {
                return c.clone();
            }
            changed = true;
            let joined = std::iter::once(c.description.as_str())
                .chain(revisions)
                .collect::<Vec<_>>()
                .join(" ");
            ClassDescription {
                label: c.label.clone(),
                description: prompting::truncate_words(&joined, max_desc_words).to_string(),
            }
        })
        .collect();
    let origin = if changed {
        ThetaOrigin::AblationConcat
    } else {
        theta_prev.origin
    };
    theta_prev.next(origin, per_class)
}

/// Files a run writes under its output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn confusion(&self) -> PathBuf {
        self.root.join("confusion.csv")
    }

    pub fn transcript(&self) -> PathBuf {
        self.root.join("transcript.jsonl")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.checkpoints().join(Checkpoint::file_name(step))
    }

    pub fn final_theta(&self) -> PathBuf {
        self.root.join("theta_final.txt")
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub final_theta: VerbalParameters,
    pub metrics: Vec<MetricsRecord>,
    pub last_checkpoint: PathBuf,
    pub layout: OutputLayout,
    /// False when the run stopped early at `stop_after`.
    pub completed: bool,
}

/// Runs `config.num_steps` steps from θ_0 on an already split graph.
pub fn run(
    config: &RunConfig,
    graph: &TextAttributedGraph,
    clients: &Clients,
) -> Result<RunOutcome, EngineError> {
    let layout = OutputLayout::new(&config.output_dir);
    std::fs::create_dir_all(layout.checkpoints()).map_err(EngineError::io(&layout.root))?;
    let transcript = Transcript::create(&layout.transcript())?;
    let mut session = Session::new(config, graph, clients, transcript)?;
    let theta0 = init_theta(
        graph.labels(),
        config.prior.as_deref(),
        config.max_desc_words,
    )?;

    let (record, confusion) = eval::evaluate_theta(&mut session, &theta0)?;
    let metrics = vec![record];
    write_eval_outputs(&layout, &metrics, &confusion)?;
    session.transcript.flush()?;
    let ckpt = make_checkpoint(&session, &theta0, &metrics);
    let path = ckpt.save(&layout.checkpoints())?;
    drive(session, layout, theta0, metrics, path)
}

/// Continues a run from a checkpoint written by an identical config.
pub fn resume(
    config: &RunConfig,
    graph: &TextAttributedGraph,
    clients: &Clients,
    checkpoint: Checkpoint,
) -> Result<RunOutcome, EngineError> {
    let expected = config.digest();
    if checkpoint.config_digest != expected {
        return Err(EngineError::DigestMismatch {
            expected,
            found: checkpoint.config_digest,
        });
    }
    let layout = OutputLayout::new(&config.output_dir);
    let transcript = Transcript::reopen(&layout.transcript(), checkpoint.transcript_len)?;
    let mut session = Session::new(config, graph, clients, transcript)?;
    session.enhancer_cache = checkpoint.enhancer_cache;
    let path = layout.checkpoint(checkpoint.step);
    if !checkpoint.metrics_so_far.is_empty() {
        eval::emit_metrics(&checkpoint.metrics_so_far, &layout.metrics())?;
    }
    drive(
        session,
        layout,
        checkpoint.theta,
        checkpoint.metrics_so_far,
        path,
    )
}

fn make_checkpoint(
    session: &Session<'_>,
    theta: &VerbalParameters,
    metrics: &[MetricsRecord],
) -> Checkpoint {
    Checkpoint {
        config_digest: session.config.digest(),
        step: theta.step,
        theta: theta.clone(),
        batch_cursor: theta.step,
        metrics_so_far: metrics.to_vec(),
        transcript_len: session.transcript.len(),
        enhancer_cache: session.enhancer_cache.clone(),
    }
}

fn write_eval_outputs(
    layout: &OutputLayout,
    metrics: &[MetricsRecord],
    confusion: &ConfusionMatrix,
) -> Result<(), EngineError> {
    eval::emit_metrics(metrics, &layout.metrics())?;
    eval::emit_confusion(confusion, &layout.confusion())?;
    Ok(())
}

fn drive(
    mut session: Session<'_>,
    layout: OutputLayout,
    mut theta: VerbalParameters,
    mut metrics: Vec<MetricsRecord>,
    mut last_checkpoint: PathBuf,
) -> Result<RunOutcome, EngineError> {
    let config = session.config;
    let batches = make_batches(
        session.graph,
        config.batch_size,
        config.seeds.batch,
        config.num_steps,
    )?;
    let abort = |step, checkpoint: &Path, e: EngineError| EngineError::Aborted {
        step,
        checkpoint: checkpoint.to_path_buf(),
        source: Box::new(e),
    };

    while theta.step < config.num_steps {
        if config.stop_after.is_some_and(|s| theta.step >= s) {
            return Ok(RunOutcome {
                final_theta: theta,
                metrics,
                last_checkpoint,
                layout,
                completed: false,
            });
        }
        let batch = &batches[theta.step];
        let (next, result) = match session.run_step(batch, &theta) {
            Ok(r) => r,
            Err(e) => {
                warn!("step {} failed: {e}", theta.step + 1);
                return Err(abort(theta.step + 1, &last_checkpoint, e));
            }
        };
        info!(
            "step {}: batch accuracy {:.3}, calls {:?}",
            result.step, result.batch_accuracy, result.calls
        );
        theta = next;
        if theta.step.is_multiple_of(config.eval_every) {
            let (record, confusion) = eval::evaluate_theta(&mut session, &theta)
                .map_err(|e| abort(theta.step, &last_checkpoint, e))?;
            info!("step {}: test accuracy {:.3}", record.step, record.accuracy);
            metrics.push(record);
            write_eval_outputs(&layout, &metrics, &confusion)?;
        }
        session.transcript.flush()?;
        last_checkpoint =
            make_checkpoint(&session, &theta, &metrics).save(&layout.checkpoints())?;
    }

    let final_path = layout.final_theta();
    std::fs::write(&final_path, theta.to_text()).map_err(EngineError::io(&final_path))?;
    Ok(RunOutcome {
        final_theta: theta,
        metrics,
        last_checkpoint,
        layout,
        completed: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn theta() -> VerbalParameters {
        VerbalParameters {
            step: 4,
            origin: ThetaOrigin::Summarized,
            per_class: vec![
                ClassDescription {
                    label: "A".into(),
                    description: "alpha".into(),
                },
                ClassDescription {
                    label: "B".into(),
                    description: "beta".into(),
                },
            ],
        }
    }

    fn update(node: &str, revisions: &[(&str, &str)]) -> IntermediateUpdate {
        IntermediateUpdate {
            node_id: NodeId::new(node),
            step: 5,
            per_class_revisions: revisions
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            rationale: String::new(),
            was_correct: false,
        }
    }

    #[test]
    fn concat_in_node_order_previous_first() {
        let next = concat_updates(
            &theta(),
            &[
                update("n1", &[("B", "one")]),
                update("n2", &[("B", "two three")]),
            ],
            200,
        );
        assert_eq!(next.step, 5);
        assert_eq!(next.origin, ThetaOrigin::AblationConcat);
        assert_eq!(next.get("A"), Some("alpha"));
        assert_eq!(next.get("B"), Some("beta one two three"));
        let capped = concat_updates(&theta(), &[update("n1", &[("B", "one two")])], 2);
        assert_eq!(capped.get("B"), Some("beta one"));
    }

    #[test]
    fn concat_without_revisions_carries_over() {
        let next = concat_updates(&theta(), &[update("n1", &[])], 200);
        assert_eq!(next.per_class, theta().per_class);
        assert_eq!(next.origin, ThetaOrigin::Summarized);
    }

    #[test]
    fn call_tally_ignores_events() {
        let mut log = vec![Exchange::event(
            RoleTag::Optimizer,
            None,
            flags::SKIPPED_CORRECT,
        )];
        log.push(Exchange {
            role: RoleTag::Predictor,
            node: None,
            attempt: 1,
            messages: vec![],
            completion: Some("x".into()),
            flag: None,
        });
        let c = CallCounts::tally(&log);
        assert_eq!(c.predictor, 1);
        assert_eq!(c.optimizer, 0);
    }
}
