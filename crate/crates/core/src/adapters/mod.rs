//! LoRA / DoRA adapter layers, the Gram orthogonality penalty, parameter
//! grouping into magnitudes and directions, and layer checkpoints.

mod checkpoint;
mod groups;
mod layer;
mod regularizer;

pub use checkpoint::{layers_from_json, layers_to_json, load_layers, save_layers, LAYER_FORMAT, LAYER_FORMAT_VERSION};
pub use groups::{Level, ParamGroup, ParamRef};
pub use layer::{
    direction_matrix, dora_forward, lora_forward, merge_weights, AdapterLayer, AdapterMode, LayerVars, ParamKind,
};
pub use regularizer::{gram_penalty_var, gram_regularizer};
