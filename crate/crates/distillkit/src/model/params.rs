//! The realized model: a named parameter store plus adapter bookkeeping.
//!
//! Parameter initialization draws each tensor from its own seeded stream
//! keyed by the parameter name, so two models built from the same (config,
//! seed) are bitwise identical regardless of construction order.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::config::{AdapterConfig, ModelConfig};
use crate::numerics::optimizer::Param;

/// Names of the per-matrix/bias pieces of one attention block.
pub const ATTN_PARTS: [&str; 8] = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"];

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Vec<Param>,
    index: BTreeMap<String, usize>,
    /// Adapter groups present, in insertion order.
    pub adapter_groups: Vec<String>,
    /// Which adapter group participates in forward passes, if any.
    pub active_adapter: Option<String>,
    pub seed: u64,
}

fn xavier(rng: &mut rand_chacha::ChaCha12Rng, rows: usize, cols: usize) -> Vec<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen::<f64>() * 2.0 * a - a).collect()
}

fn embed_init(rng: &mut rand_chacha::ChaCha12Rng, rows: usize, d: usize) -> Vec<f64> {
    // Uniform with variance 1/d, so sqrt(d)-scaled embeddings are unit-ish.
    let a = (3.0 / d as f64).sqrt();
    (0..rows * d).map(|_| rng.gen::<f64>() * 2.0 * a - a).collect()
}

impl Model {
    /// Build and initialize a model from a validated config.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut model = Model {
            cfg: cfg.clone(),
            params: Vec::new(),
            index: BTreeMap::new(),
            adapter_groups: Vec::new(),
            active_adapter: None,
            seed,
        };
        let d = cfg.d_model;
        let f = cfg.d_ff;

        model.add_embed("src_embed", cfg.vocab_src, d)?;
        model.add_embed("tgt_embed", cfg.vocab_tgt, d)?;
        model.add_embed("enc_pos", cfg.max_positions, d)?;
        model.add_embed("dec_pos", cfg.max_positions, d)?;
        if cfg.embed_layernorm {
            model.add_layer_norm("enc_embed_ln")?;
            model.add_layer_norm("dec_embed_ln")?;
        }
        for l in 0..cfg.unique_layers {
            model.add_attention(&format!("enc.{l}.attn"))?;
            model.add_layer_norm(&format!("enc.{l}.attn_ln"))?;
            model.add_ffn(&format!("enc.{l}.ffn"), d, f)?;
            model.add_layer_norm(&format!("enc.{l}.ffn_ln"))?;
        }
        for l in 0..cfg.unique_layers {
            model.add_attention(&format!("dec.{l}.self_attn"))?;
            model.add_layer_norm(&format!("dec.{l}.self_ln"))?;
            model.add_attention(&format!("dec.{l}.cross_attn"))?;
            model.add_layer_norm(&format!("dec.{l}.cross_ln"))?;
            model.add_ffn(&format!("dec.{l}.ffn"), d, f)?;
            model.add_layer_norm(&format!("dec.{l}.ffn_ln"))?;
        }
        if cfg.pre_norm {
            model.add_layer_norm("enc_final_ln")?;
            model.add_layer_norm("dec_final_ln")?;
        }
        model.add_matrix("out_proj.w", cfg.vocab_tgt, d)?;
        model.add_zeros("out_proj.b", vec![cfg.vocab_tgt])?;
        Ok(model)
    }

    /// Reassemble a model from checkpoint pieces, rebuilding the name index
    /// and validating shape/name consistency.
    pub(crate) fn from_parts(
        cfg: ModelConfig,
        params: Vec<Param>,
        adapter_groups: Vec<String>,
        active_adapter: Option<String>,
        seed: u64,
    ) -> Result<Model> {
        let mut index = BTreeMap::new();
        for (i, p) in params.iter().enumerate() {
            let expect: usize = p.shape.iter().product();
            if p.data.len() != expect {
                return Err(Error::Shape(format!(
                    "parameter '{}' holds {} values but is shaped {:?}",
                    p.name,
                    p.data.len(),
                    p.shape
                )));
            }
            if index.insert(p.name.clone(), i).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter '{}'", p.name)));
            }
        }
        if let Some(g) = &active_adapter {
            if !adapter_groups.iter().any(|x| x == g) {
                return Err(Error::Checkpoint(format!(
                    "active adapter '{g}' is not among the stored groups"
                )));
            }
        }
        Ok(Model { cfg, params, index, adapter_groups, active_adapter, seed })
    }

    fn init_rng(&self, name: &str) -> rand_chacha::ChaCha12Rng {
        crate::rng::stream(self.seed, &format!("init/{name}"))
    }

    fn push(&mut self, param: Param) -> Result<()> {
        if self.index.contains_key(&param.name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter '{}'", param.name)));
        }
        self.index.insert(param.name.clone(), self.params.len());
        self.params.push(param);
        Ok(())
    }

    fn add_embed(&mut self, name: &str, rows: usize, d: usize) -> Result<()> {
        let mut rng = self.init_rng(name);
        let data = embed_init(&mut rng, rows, d);
        self.push(Param::new(name, vec![rows, d], data))
    }

    /// Weight matrix stored [out, in]; applied as x * W^T.
    fn add_matrix(&mut self, name: &str, out: usize, inp: usize) -> Result<()> {
        let mut rng = self.init_rng(name);
        let data = xavier(&mut rng, out, inp);
        self.push(Param::new(name, vec![out, inp], data))
    }

    fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<()> {
        let len = shape.iter().product();
        self.push(Param::new(name, shape, vec![0.0; len]))
    }

    fn add_layer_norm(&mut self, prefix: &str) -> Result<()> {
        let d = self.cfg.d_model;
        self.push(Param::new(format!("{prefix}.gamma"), vec![d], vec![1.0; d]))?;
        self.add_zeros(&format!("{prefix}.beta"), vec![d])
    }

    fn add_attention(&mut self, prefix: &str) -> Result<()> {
        let d = self.cfg.d_model;
        for part in ["wq", "wk", "wv", "wo"] {
            self.add_matrix(&format!("{prefix}.{part}"), d, d)?;
        }
        for part in ["bq", "bk", "bv", "bo"] {
            self.add_zeros(&format!("{prefix}.{part}"), vec![d])?;
        }
        Ok(())
    }

    fn add_ffn(&mut self, prefix: &str, d: usize, f: usize) -> Result<()> {
        self.add_matrix(&format!("{prefix}.w1"), f, d)?;
        self.add_zeros(&format!("{prefix}.b1"), vec![f])?;
        self.add_matrix(&format!("{prefix}.w2"), d, f)?;
        self.add_zeros(&format!("{prefix}.b2"), vec![d])
    }

    pub fn param_id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("no parameter named '{name}'")))
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        Ok(&self.params[self.param_id(name)?])
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param> {
        let id = self.param_id(name)?;
        Ok(&mut self.params[id])
    }

    /// Total scalar parameters actually materialized (base + all adapters).
    pub fn n_params(&self) -> u64 {
        self.params.iter().map(|p| p.data.len() as u64).sum()
    }

    /// Which unique layer parameterizes layer application `l`.
    pub fn layer_slot(&self, l: usize) -> usize {
        l % self.cfg.unique_layers
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Insert a zero-initialized adapter set after every encoder and
    /// decoder layer application, freeze everything else, and make the new
    /// group active. The up-projection starts at zero so the adapted model
    /// computes exactly the base function until trained.
    pub fn insert_adapters(&mut self, acfg: &AdapterConfig) -> Result<()> {
        acfg.validate()?;
        if self.adapter_groups.iter().any(|g| g == &acfg.group) {
            return Err(Error::InvalidConfig(format!(
                "adapters for group '{}' already present",
                acfg.group
            )));
        }
        let d = self.cfg.d_model;
        let b = acfg.bottleneck;
        let group = acfg.group.clone();
        for stack in ["enc", "dec"] {
            for l in 0..self.cfg.layers {
                let prefix = format!("adapter.{group}.{stack}.{l}");
                self.add_layer_norm(&format!("{prefix}.ln"))?;
                self.add_matrix(&format!("{prefix}.down.w"), b, d)?;
                self.add_zeros(&format!("{prefix}.down.b"), vec![b])?;
                self.add_zeros(&format!("{prefix}.up.w"), vec![d, b])?;
                self.add_zeros(&format!("{prefix}.up.b"), vec![d])?;
            }
        }
        self.adapter_groups.push(group.clone());
        self.set_active_adapter(Some(&group))
    }

    /// Select which adapter group runs in forward passes. Whenever any
    /// adapters exist, the base stays frozen and only the active group is
    /// trainable.
    pub fn set_active_adapter(&mut self, group: Option<&str>) -> Result<()> {
        if let Some(g) = group {
            if !self.adapter_groups.iter().any(|x| x == g) {
                return Err(Error::InvalidConfig(format!("no adapter group '{g}'")));
            }
        }
        self.active_adapter = group.map(|s| s.to_string());
        let base_trainable = self.adapter_groups.is_empty();
        for p in &mut self.params {
            p.trainable = if let Some(rest) = p.name.strip_prefix("adapter.") {
                match &self.active_adapter {
                    Some(g) => rest.starts_with(&format!("{g}.")),
                    None => false,
                }
            } else {
                base_trainable
            };
        }
        Ok(())
    }

    /// Names of the adapter parameters for one (group, stack, layer).
    pub fn adapter_prefix(&self, group: &str, stack: &str, layer: usize) -> String {
        format!("adapter.{group}.{stack}.{layer}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{adapter_layer_params, count_params};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            d_ff: 32,
            layers: 2,
            heads: 4,
            unique_layers: 2,
            vocab_src: 12,
            vocab_tgt: 10,
            max_positions: 32,
            pre_norm: true,
            embed_layernorm: true,
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = small_cfg();
        let a = Model::build(&cfg, 9).unwrap();
        let b = Model::build(&cfg, 9).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.data, pb.data);
        }
        let c = Model::build(&cfg, 10).unwrap();
        assert_ne!(a.params[0].data, c.params[0].data);
    }

    #[test]
    fn materialized_size_matches_closed_form() {
        for unique in [1, 2] {
            let cfg = ModelConfig { unique_layers: unique, ..small_cfg() };
            let m = Model::build(&cfg, 1).unwrap();
            assert_eq!(m.n_params(), count_params(&cfg), "unique_layers={unique}");
        }
        // Convention toggles shrink the count accordingly.
        let cfg = ModelConfig { pre_norm: false, embed_layernorm: false, ..small_cfg() };
        let m = Model::build(&cfg, 1).unwrap();
        assert_eq!(m.n_params(), count_params(&cfg));
    }

    #[test]
    fn tied_model_shares_layer_slots() {
        let cfg = ModelConfig { unique_layers: 1, layers: 6, ..small_cfg() };
        let m = Model::build(&cfg, 3).unwrap();
        for l in 0..6 {
            assert_eq!(m.layer_slot(l), 0);
        }
        assert!(m.param("enc.0.attn.wq").is_ok());
        assert!(m.param("enc.1.attn.wq").is_err());
    }

    #[test]
    fn adapter_insertion_counts_and_freezes() {
        let cfg = small_cfg();
        let mut m = Model::build(&cfg, 5).unwrap();
        let base = m.n_params();
        let acfg = AdapterConfig { bottleneck: 4, adapter_dropout: 0.0, group: "aa".into() };
        m.insert_adapters(&acfg).unwrap();
        let added = m.n_params() - base;
        let expect = 2 * cfg.layers as u64 * adapter_layer_params(&cfg, 4);
        assert_eq!(added, expect);
        // Base params frozen, adapter params trainable.
        for p in &m.params {
            if p.name.starts_with("adapter.aa.") {
                assert!(p.trainable, "{} should train", p.name);
            } else {
                assert!(!p.trainable, "{} should be frozen", p.name);
            }
        }
        // Double insertion for the same group is an error.
        assert!(m.insert_adapters(&acfg).is_err());
    }

    #[test]
    fn switching_active_adapter_switches_trainability() {
        let cfg = small_cfg();
        let mut m = Model::build(&cfg, 5).unwrap();
        m.insert_adapters(&AdapterConfig { bottleneck: 4, adapter_dropout: 0.0, group: "aa".into() })
            .unwrap();
        m.insert_adapters(&AdapterConfig { bottleneck: 4, adapter_dropout: 0.0, group: "bb".into() })
            .unwrap();
        m.set_active_adapter(Some("aa")).unwrap();
        assert!(m.param("adapter.aa.enc.0.down.w").unwrap().trainable);
        assert!(!m.param("adapter.bb.enc.0.down.w").unwrap().trainable);
        assert!(m.set_active_adapter(Some("zz")).is_err());
    }

    #[test]
    fn adapter_up_projection_starts_at_zero() {
        let cfg = small_cfg();
        let mut m = Model::build(&cfg, 5).unwrap();
        m.insert_adapters(&AdapterConfig { bottleneck: 4, adapter_dropout: 0.0, group: "aa".into() })
            .unwrap();
        let up = m.param("adapter.aa.dec.1.up.w").unwrap();
        assert!(up.data.iter().all(|&v| v == 0.0));
    }
}
