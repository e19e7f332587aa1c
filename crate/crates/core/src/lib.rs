//! Text-to-SQL prediction by execution consistency over a pool of sampled
//! candidates, plus the evaluation harness used to score predictions.
//!
//! The pipeline runs in stages:
//! [`catalog`] loads schemas, [`content_linker`] finds question-relevant cell
//! values, [`promptgen`] renders prompts, [`llm_gateway`] samples completions,
//! [`sql_exec`] runs them in a read-only sandbox, and [`consistency`] votes.
//! [`evalkit`] computes EX and a simplified test-suite accuracy.

pub mod catalog;
pub mod consistency;
pub mod content_linker;
pub mod evalkit;
pub mod llm_gateway;
pub mod promptgen;
pub mod sql_exec;
