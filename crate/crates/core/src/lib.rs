//! Writer-Editor refinement loops for constraint-faithful children's stories.
//!
//! * [`domain`]: tiles, tuples, stories, critiques and traces.
//! * [`gateway`]: chat-model access (live HTTP, scripted, replay).
//! * [`prompts`]: the loop and guidance prompt templates.
//! * [`engine`]: the loop itself and the Editor score parser.
//! * [`harness`]: batch experiments with one Writer and several Editors.
//! * [`analytics`]: per-loop statistics and discrete-time survival analysis.
//! * [`service`]: the interactive HTTP session service.

pub mod analytics;
pub mod config;
pub mod domain;
pub mod engine;
pub mod gateway;
pub mod harness;
pub mod prompts;
pub mod service;
