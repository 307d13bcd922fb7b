//! Transformer encoder–decoder with recurrent layer stacking, bottleneck
//! adapters, beam decoding, and a byte-stable checkpoint container.

pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod forward;
pub mod params;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint};
pub use config::{
    adapter_layer_params, count_params, published_config, AdapterConfig, ModelConfig,
};
pub use decode::{Hypothesis, DEFAULT_BEAM};
pub use forward::Binding;
pub use params::Model;
