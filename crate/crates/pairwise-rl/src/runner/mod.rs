//! Experiment orchestration: configuration, the staged pipeline, reports,
//! and the manifest that makes re-runs skip finished work.
//!
//! The submodules split along the data they own: [`config`] defines the
//! experiment document, [`manifest`] the completion/integrity record,
//! [`stages`] the pipeline bodies and the [`stages::Runner`], and
//! [`report`] the evaluation summary plus the paired critic ablation.

pub mod config;
pub mod manifest;
pub mod report;
pub mod stages;

pub use config::{
    AnchorSection, DataConfig, DistillSection, EvalSection, ExperimentConfig, KlcheckSection,
    RlSection, RmSection, SeedsConfig,
};
pub use manifest::{RunManifest, StageRecord, MANIFEST_FILE, MANIFEST_VERSION};
pub use report::{run_ablation, AblationArm, AblationReport, AnchorSummary, EvalReport};
pub use stages::{
    artifact, kind, AnchorRecord, BoundRecord, KlcheckSummary, RmEvalRecord, Runner, Stage,
    StageOutcome,
};
