//! Ranking of kernel implementations from simulator statistics.
//!
//! Statistics dumps are parsed into per-implementation counter vectors,
//! normalized against their kernel group, and scored by a learned
//! predictor. The score approximates relative runtime, so sorting by it
//! ranks candidates without running them on hardware.

pub mod error;
pub mod evaluation;
pub mod features;
pub mod hyperopt;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod predictors;
pub mod stats;
pub mod util;

pub use error::{Error, Result};
pub use features::{
    assemble_feature_vector, target_score, FeatureMatrix, FeatureVector, GroupMeans, GroupSummary, WindowMode,
    WindowSample, WindowState,
};
pub use metrics::{e_top1, parallel_break_even, quality_score, r_top1, RankingReport};
pub use model::{
    feature_schema, CacheCounterSet, CacheLevelSpec, CacheTopology, Dataset, FeatureSchema, GroupKey,
    ImplementationRecord, KernelGroup, StatVector, DATASET_FORMAT_VERSION,
};
pub use orchestrator::{JobResult, JobStatus, SimulatorAdapter, TuningJob};
pub use predictors::{LossKind, PredictorConfig, PredictorKind, PredictorModel, MODEL_FORMAT_VERSION};
pub use stats::{extract_stat_vector, parse_stats_text, RawStatsDump, StatsMapping};
