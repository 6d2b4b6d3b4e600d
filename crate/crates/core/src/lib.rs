//! Verbalized graph representation learning: text-attributed graphs,
//! chat-model clients, prompt rendering and parsing, the optimization
//! loop over natural-language class descriptions, evaluation, and an
//! entropy-bound checker.

pub mod engine;
pub mod eval;
pub mod graph;
pub mod llm;
pub mod prompting;
pub mod theory;
