//! Architecture family, parameters, the forward pass and checkpoints.

mod checkpoint;
mod config;
pub mod engine;
mod forward;
mod params;

pub use checkpoint::{dense_weights_csv, load_checkpoint, save_checkpoint, spatial_weights_csv, Checkpoint, FORMAT_VERSION};
pub use config::{ModelConfig, ParamCount, Pooling, Preset, Shapes};
pub use forward::{
    argmax, batch_norm, batch_tensor, dense_softmax, dropout_mask, forward, log_activation, pool_power, softmax,
    spatial_combine, temporal_filter, Activations, BnOutput, Mode, BN_EPS, POWER_CLAMP,
};
pub use params::{build_model, build_with_default_bank, ModelParams, ParamId, Tensor};
