//! Interchange interventions: trigger dependency inside one model and
//! cross-model patching between a control and a treatment model.

mod cross;
mod dependency;

pub use cross::{
    cross_model_intervene, cross_model_scan, reuse_ratio, select_examples, Component, CrossExample, CrossModelResult,
    LocationSet, ReuseRatio, ReuseScore, SetScore, Source, Variant, REUSE_FLOOR,
};
pub use dependency::{
    dependency_count, dependency_profile, trigger_dependency, DependencyOptions, DependencyResult, DEFAULT_THRESHOLD,
};
