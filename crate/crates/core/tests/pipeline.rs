mod common;

use std::path::Path;
use std::sync::Arc;

use common::*;
use vgrl_core::engine::{
    self, flags, read_transcript, Ablation, Checkpoint, Clients, EngineError, OptimizerPolicy,
    OutputLayout, Phase, RunConfig, Session, Transcript,
};
use vgrl_core::graph::{make_batches, TextAttributedGraph};
use vgrl_core::llm::{LlmError, ReplayBackend};
use vgrl_core::prompting::RoleTag;

fn setup(dir: &Path, out: &str) -> (RunConfig, TextAttributedGraph) {
    let (data, labels) = write_fixture(dir, 5);
    let config = hermetic_config(&data, &labels, &dir.join(out), Ablation::None);
    let graph = config.prepare_graph().unwrap();
    (config, graph)
}

#[test]
fn abort_reports_checkpoint_and_resume_matches_clean_run() {
    let dir = tempfile::tempdir().unwrap();
    let (config, graph) = setup(dir.path(), "clean");
    engine::run(&config, &graph, &MockLlm::new().clients()).unwrap();

    let mut crashed = config.clone();
    crashed.output_dir = dir.path().join("crashed");
    let err = engine::run(&crashed, &graph, &MockLlm::failing_after(300).clients()).unwrap_err();
    let EngineError::Aborted {
        step,
        checkpoint,
        source,
    } = err
    else {
        panic!("expected abort, got {err}");
    };
    assert!(matches!(
        *source,
        EngineError::Llm(LlmError::Timeout { attempts: 3 })
    ));
    assert_eq!(
        checkpoint,
        OutputLayout::new(&crashed.output_dir).checkpoint(step - 1)
    );

    let ckpt = Checkpoint::load(&checkpoint).unwrap();
    engine::resume(&crashed, &graph, &MockLlm::new().clients(), ckpt).unwrap();
    assert_eq!(snapshot(&config.output_dir), snapshot(&crashed.output_dir));
}

#[test]
fn resume_rejects_other_config() {
    let dir = tempfile::tempdir().unwrap();
    let (mut config, graph) = setup(dir.path(), "out");
    config.stop_after = Some(2);
    engine::run(&config, &graph, &MockLlm::new().clients()).unwrap();
    let ckpt = Checkpoint::load(&OutputLayout::new(&config.output_dir).checkpoint(2)).unwrap();
    config.batch_size = 4;
    let err = engine::resume(&config, &graph, &MockLlm::new().clients(), ckpt).unwrap_err();
    assert!(matches!(err, EngineError::DigestMismatch { .. }));
}

#[test]
fn replaying_the_transcript_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (config, graph) = setup(dir.path(), "live");
    engine::run(&config, &graph, &MockLlm::new().clients()).unwrap();
    let entries = read_transcript(&OutputLayout::new(&config.output_dir).transcript()).unwrap();
    let replay = |role: RoleTag| {
        Arc::new(ReplayBackend::new(
            role.as_str(),
            entries
                .iter()
                .filter(|e| e.role == role)
                .filter_map(|e| Some((e.messages.clone(), e.completion.clone()?))),
        ))
    };
    let clients = Clients::per_role(
        replay(RoleTag::Enhancer),
        replay(RoleTag::Predictor),
        replay(RoleTag::Optimizer),
        replay(RoleTag::Summary),
    );
    let mut again = config.clone();
    again.output_dir = dir.path().join("replayed");
    engine::run(&again, &graph, &clients).unwrap();
    assert_eq!(snapshot(&config.output_dir), snapshot(&again.output_dir));
}

#[test]
fn step_call_counts_follow_policy() {
    let dir = tempfile::tempdir().unwrap();
    let (mut config, graph) = setup(dir.path(), "out");
    let clients = MockLlm::new().clients();
    let batch = &make_batches(&graph, config.batch_size, config.seeds.batch, 1).unwrap()[0];
    let theta0 = engine::init_theta(graph.labels(), None, 200).unwrap();
    let with_neighbors = batch
        .node_ids
        .iter()
        .filter(|id| !graph.one_hop_neighbors(id).unwrap().is_empty())
        .count();

    let mut session = Session::new(&config, &graph, &clients, Transcript::in_memory()).unwrap();
    let (next, result) = session.run_step(batch, &theta0).unwrap();
    assert_eq!(next.step, 1);
    assert_eq!(result.calls.enhancer, with_neighbors);
    assert_eq!(result.calls.predictor, batch.node_ids.len());
    assert_eq!(result.calls.optimizer, batch.node_ids.len());
    let wrong = result
        .predictions
        .iter()
        .filter(|p| !p.predicted.matches(&p.truth))
        .count();
    assert_eq!(result.calls.summary, usize::from(wrong > 0));
    assert_eq!(
        result.batch_accuracy,
        (batch.node_ids.len() - wrong) as f64 / batch.node_ids.len() as f64
    );

    config.optimizer_policy = OptimizerPolicy::ErrorsOnly;
    let mut session = Session::new(&config, &graph, &clients, Transcript::in_memory()).unwrap();
    let (_, result) = session.run_step(batch, &theta0).unwrap();
    assert_eq!(result.calls.optimizer, wrong);
    let skipped = session
        .transcript
        .entries()
        .iter()
        .filter(|e| e.flag.as_deref() == Some(flags::SKIPPED_CORRECT))
        .count();
    assert_eq!(skipped, batch.node_ids.len() - wrong);
    assert!(session
        .transcript
        .entries()
        .iter()
        .all(|e| e.step == 1 && e.phase == Phase::Train));
}

#[test]
fn node_only_mode_never_calls_the_enhancer() {
    let dir = tempfile::tempdir().unwrap();
    let (mut config, graph) = setup(dir.path(), "out");
    config.node_only = true;
    config.num_steps = 5;
    let outcome = engine::run(&config, &graph, &MockLlm::new().clients()).unwrap();
    assert!(outcome.completed);
    let entries = read_transcript(&outcome.layout.transcript()).unwrap();
    assert!(entries.iter().all(|e| e.role != RoleTag::Enhancer));
    let predictor = entries
        .iter()
        .find(|e| e.role == RoleTag::Predictor)
        .unwrap();
    assert!(predictor.messages[1]
        .content
        .contains("No neighbor information is available."));
}

#[test]
fn test_split_summaries_are_computed_once() {
    let dir = tempfile::tempdir().unwrap();
    let (config, graph) = setup(dir.path(), "out");
    let outcome = engine::run(&config, &graph, &MockLlm::new().clients()).unwrap();
    let entries = read_transcript(&outcome.layout.transcript()).unwrap();
    let eval_enhancer: Vec<_> = entries
        .iter()
        .filter(|e| e.phase == Phase::Eval && e.role == RoleTag::Enhancer)
        .collect();
    assert!(!eval_enhancer.is_empty());
    assert!(eval_enhancer.iter().all(|e| e.step == 0));
    let mut nodes: Vec<_> = eval_enhancer.iter().map(|e| e.node.clone()).collect();
    nodes.dedup();
    assert_eq!(nodes.len(), eval_enhancer.len());
}

#[test]
fn final_export_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (config, graph) = setup(dir.path(), "out");
    let outcome = engine::run(&config, &graph, &MockLlm::new().clients()).unwrap();
    let text = std::fs::read_to_string(outcome.layout.final_theta()).unwrap();
    let back = engine::VerbalParameters::from_text(&text, graph.labels(), 200).unwrap();
    assert_eq!(back, outcome.final_theta);
    assert_eq!(back.per_class.len(), 7);
}
