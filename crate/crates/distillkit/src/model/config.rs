//! Model configuration and exact parameter accounting.
//!
//! The parameter count follows one fixed convention: learned positional
//! embeddings on both sides, untied target-side output projection with
//! bias, layer-normalized embeddings, a final layer norm per stack (when
//! pre-norm), and every linear bias counted. Tied (recurrently stacked)
//! layers are counted once. Under this convention the published
//! configurations land within a fraction of a percent of their reported
//! sizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    /// Layer applications per stack (encoder and decoder each run this many).
    pub layers: usize,
    pub heads: usize,
    /// Distinct parameterized layers per stack; 1 means one layer applied
    /// `layers` times (recurrent stacking), `layers` means no tying.
    pub unique_layers: usize,
    pub vocab_src: usize,
    pub vocab_tgt: usize,
    pub max_positions: usize,
    pub pre_norm: bool,
    pub embed_layernorm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Desk-scale default: a narrow, shallow model whose vocabularies
        // are filled in from the trained subword vocabs.
        ModelConfig {
            d_model: 32,
            d_ff: 128,
            layers: 2,
            heads: 4,
            unique_layers: 2,
            vocab_src: 64,
            vocab_tgt: 64,
            max_positions: 256,
            pre_norm: true,
            embed_layernorm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig(
                "d_model, d_ff, layers, and heads must all be positive".into(),
            ));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.unique_layers == 0 || self.layers % self.unique_layers != 0 {
            return Err(Error::InvalidConfig(format!(
                "unique_layers {} must divide layers {}",
                self.unique_layers, self.layers
            )));
        }
        if self.vocab_src < 4 || self.vocab_tgt < 4 {
            return Err(Error::InvalidConfig(
                "vocabularies must hold at least the 4 reserved tokens".into(),
            ));
        }
        if self.max_positions == 0 {
            return Err(Error::InvalidConfig("max_positions must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Parameters in one encoder layer: Q/K/V/O projections with biases, a
/// GELU FFN with biases, and two layer norms.
pub fn encoder_layer_params(cfg: &ModelConfig) -> u64 {
    let d = cfg.d_model as u64;
    let f = cfg.d_ff as u64;
    4 * d * d + 2 * d * f + f + 9 * d
}

/// Decoder layer adds a cross-attention block and its layer norm.
pub fn decoder_layer_params(cfg: &ModelConfig) -> u64 {
    let d = cfg.d_model as u64;
    let f = cfg.d_ff as u64;
    8 * d * d + 2 * d * f + f + 15 * d
}

/// Exact parameter count for a configuration under the documented
/// convention. Tied layers count once.
pub fn count_params(cfg: &ModelConfig) -> u64 {
    let d = cfg.d_model as u64;
    let vs = cfg.vocab_src as u64;
    let vt = cfg.vocab_tgt as u64;
    let p = cfg.max_positions as u64;
    let u = cfg.unique_layers as u64;
    let mut total = (vs + vt) * d; // token embeddings
    total += 2 * p * d; // learned positions, both stacks
    if cfg.embed_layernorm {
        total += 4 * d; // embedding layer norms, both stacks
    }
    if cfg.pre_norm {
        total += 4 * d; // final layer norms, both stacks
    }
    total += d * vt + vt; // untied output projection with bias
    total += u * encoder_layer_params(cfg);
    total += u * decoder_layer_params(cfg);
    total
}

/// Adapter parameters inserted per layer application: adapter layer norm,
/// down-projection to the bottleneck, up-projection back, both with biases.
pub fn adapter_layer_params(cfg: &ModelConfig, bottleneck: usize) -> u64 {
    let d = cfg.d_model as u64;
    let b = bottleneck as u64;
    2 * d + (d * b + b) + (b * d + d)
}

/// Configuration for adapter insertion. The activation is GELU and the
/// placement is after every encoder and decoder layer application, by
/// construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub bottleneck: usize,
    pub adapter_dropout: f64,
    /// Identifies the adapter set: a language id or family id.
    pub group: String,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig { bottleneck: 256, adapter_dropout: 0.1, group: String::new() }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bottleneck == 0 {
            return Err(Error::InvalidConfig("adapter bottleneck must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.adapter_dropout) {
            return Err(Error::InvalidConfig(format!(
                "adapter_dropout must lie in [0, 1), got {}",
                self.adapter_dropout
            )));
        }
        if self.group.is_empty() {
            return Err(Error::InvalidConfig("adapter group must be named".into()));
        }
        Ok(())
    }
}

/// The published architecture grid, reproduced at full scale for parameter
/// accounting: (name, d_model, d_ff, layers, heads, unique_layers).
pub const PUBLISHED_CONFIGS: [(&str, usize, usize, usize, usize, usize); 7] = [
    ("base", 512, 2048, 6, 8, 6),
    ("base12L", 512, 2048, 12, 8, 12),
    ("base18L", 512, 2048, 18, 8, 18),
    ("base24L", 512, 2048, 24, 8, 24),
    ("big", 1024, 4096, 6, 16, 6),
    ("huge_RS", 1536, 4096, 6, 16, 1),
    ("huge", 1536, 4096, 6, 16, 6),
];

/// Full-scale config for one published row (32K vocabularies, 2048
/// positions).
pub fn published_config(name: &str) -> Option<ModelConfig> {
    PUBLISHED_CONFIGS.iter().find(|c| c.0 == name).map(|&(_, d, f, l, h, u)| ModelConfig {
        d_model: d,
        d_ff: f,
        layers: l,
        heads: h,
        unique_layers: u,
        vocab_src: 32_000,
        vocab_tgt: 32_000,
        max_positions: 2048,
        pre_norm: true,
        embed_layernorm: true,
    })
}
