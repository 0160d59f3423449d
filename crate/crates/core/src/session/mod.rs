//! Session orchestration: data ingestion, configuration, the synthetic
//! benchmark and the incremental pipeline.

pub mod config;
mod data;
pub mod manifest;
pub mod pipeline;
pub mod synth;

pub use config::{SessionConfig, Strategy};
pub use data::FeatureSet;
pub use manifest::{load_benchmark, Manifest};
pub use pipeline::{
    evaluate, novel_prototypes, run_all, run_base_session, run_incremental_session, Benchmark, KnowledgeInputs,
    NovelPrototypes, RunOutput, SessionLog, SessionState,
};
pub use synth::{synth_benchmark, write_benchmark, GenConfig, GroundTruth, SyntheticBenchmark};
