//! Artifact plumbing shared by every stage: the on-disk array container,
//! run manifests, the end-to-end run configuration, and the scripted
//! collapse-and-repair demonstration.

pub mod artifacts;
pub mod config;
pub mod container;
pub mod demo;
pub mod manifest;

pub use artifacts::{get_corpus, get_stats, get_store, put_corpus, put_stats, put_store};
pub use config::{stage_seed, DataSection, EvalConfig, IoConfig, RunConfig};
pub use container::{load_container, save_container, ArrayContainer, Stored};
pub use demo::{
    demo_collapse, eval_checkpoint, CollapseReport, CollapseThresholds, DemoOutcome, StageEval,
};
pub use manifest::{content_hash, hash_bytes, Manifest};
