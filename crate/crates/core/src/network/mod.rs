//! Layer stacks, forward/backward passes, parameter groups and persistence.

mod config;
mod io;
mod model;
mod pass;

pub use config::{validate_stack, GroupId, InitSpec, LayerConfig, ParamGroup, PoolKind};
pub use io::{format_f64, load_model, model_from_json, model_to_json, save_model, MODEL_FORMAT_VERSION};
pub use model::{build_model, Layer, Model, ModelMetadata, PoolParams};
pub use pass::{ForwardTrace, Gradients, PoolWorkspace};
