//! Runtime and data pipeline for modular plan/ground/execute agents.
//!
//! The crate is organized around three model-facing roles and the plumbing
//! between them:
//!
//! * a *planner* that decomposes a task into natural-language subgoals,
//! * a *grounder* that translates subgoals into the interlinked action
//!   language ([`dsl`]), and
//! * an *executor* ([`exec`]) that runs those actions against a tool
//!   registry, threading intermediate results through `R<k>` references.
//!
//! [`agent`] drives the two control flows (one-pass and iterative) against a
//! pluggable [`backend`]. [`annotate`] converts ground-truth rationales into
//! conversational training records with loss masks, and [`eval`] scores
//! traces against gold data.

pub mod agent;
pub mod annotate;
pub mod backend;
pub mod calc;
pub mod catalog;
pub mod dsl;
pub mod eval;
pub mod exec;
