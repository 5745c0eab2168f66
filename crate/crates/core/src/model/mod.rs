//! Decoder-only transformer with interventable activation sites.

mod config;
mod hooks;
mod layout;
mod transformer;

pub use config::ModelConfig;
pub use hooks::{ActivationTrace, HookLocation, Intervention, Site, TraceRequest};
pub use layout::{param_specs, ParamGroup, ParamSpec};
pub use transformer::{forward_graph, lm_loss, shifted_targets, ForwardOptions, ForwardOutput, GraphInputs, Transformer, LN_EPS};

pub(crate) use layout::block as block_index;
