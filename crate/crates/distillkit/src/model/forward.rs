//! Transformer forward passes, built on the autodiff tape.
//!
//! One implementation serves training and inference: an inference binding
//! simply marks every leaf constant and skips dropout, so the two paths can
//! never drift apart. Sentences are processed individually (no padding),
//! which keeps per-sample losses exact.

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::model::params::Model;
use crate::numerics::tape::{Tape, Value, VarId};

/// A model bound to a fresh tape for one or more forward passes.
pub struct Binding<'m> {
    model: &'m Model,
    pub tape: Tape,
    slots: Vec<Option<VarId>>,
    train: bool,
    dropout: f64,
    rng: Option<ChaCha12Rng>,
}

impl<'m> Binding<'m> {
    pub fn inference(model: &'m Model) -> Self {
        Binding {
            model,
            tape: Tape::new(),
            slots: vec![None; model.params.len()],
            train: false,
            dropout: 0.0,
            rng: None,
        }
    }

    /// Training binding: leaves of trainable parameters require gradients
    /// and dropout is live, fed by the supplied stream.
    pub fn training(model: &'m Model, dropout: f64, rng: ChaCha12Rng) -> Self {
        Binding {
            model,
            tape: Tape::new(),
            slots: vec![None; model.params.len()],
            train: true,
            dropout,
            rng: Some(rng),
        }
    }

    /// Bind a parameter as a tape leaf (once per binding).
    fn p(&mut self, name: &str) -> Result<VarId> {
        let idx = self.model.param_id(name)?;
        if let Some(id) = self.slots[idx] {
            return Ok(id);
        }
        let param = &self.model.params[idx];
        let requires = self.train && param.trainable;
        let id = self.tape.leaf(
            Value { shape: param.shape.clone(), data: param.data.clone() },
            requires,
        )?;
        self.slots[idx] = Some(id);
        Ok(id)
    }

    fn maybe_dropout(&mut self, x: VarId) -> Result<VarId> {
        if self.train && self.dropout > 0.0 {
            let rng = self.rng.as_mut().expect("training binding always has a stream");
            self.tape.dropout(x, self.dropout, rng)
        } else {
            Ok(x)
        }
    }

    /// y = x * W^T + b with W stored [out, in].
    fn linear(&mut self, x: VarId, w: &str, b: &str) -> Result<VarId> {
        let w = self.p(w)?;
        let b = self.p(b)?;
        let y = self.tape.matmul_nt(x, w)?;
        self.tape.add_bias(y, b)
    }

    fn layer_norm(&mut self, x: VarId, prefix: &str) -> Result<VarId> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        self.tape.layer_norm(x, gamma, beta)
    }

    /// Multi-head attention. Queries come from `x_q`, keys/values from
    /// `x_kv`; a causal mask restricts position i to keys 0..=i.
    fn attention(&mut self, prefix: &str, x_q: VarId, x_kv: VarId, causal: bool) -> Result<VarId> {
        let heads = self.model.cfg.heads;
        let dh = self.model.cfg.head_dim();
        let q = self.linear(x_q, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(x_kv, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(x_kv, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let t_q = self.tape.value(q).rows();
        let t_k = self.tape.value(k).rows();
        let mask = if causal {
            debug_assert_eq!(t_q, t_k, "causal attention is self-attention");
            let mut m = vec![false; t_q * t_k];
            for i in 0..t_q {
                for j in 0..=i {
                    m[i * t_k + j] = true;
                }
            }
            Some(m)
        } else {
            None
        };
        let mut ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, dh)?;
            let kh = self.tape.slice_cols(k, h * dh, dh)?;
            let vh = self.tape.slice_cols(v, h * dh, dh)?;
            let scores = self.tape.matmul_nt(qh, kh)?;
            let scaled = self.tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let probs = self.tape.softmax_rows(scaled, mask.as_deref())?;
            ctx.push(self.tape.matmul(probs, vh)?);
        }
        let cat = self.tape.concat_cols(&ctx)?;
        self.linear(cat, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    /// Position-wise FFN with GELU and dropout after the activation.
    fn ffn(&mut self, prefix: &str, x: VarId) -> Result<VarId> {
        let h = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = self.tape.gelu(h)?;
        let h = self.maybe_dropout(h)?;
        self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    /// Residual adapter: y + up(gelu(down(norm(y)))). A no-op function at
    /// insertion time because the up-projection starts at zero.
    fn adapter(&mut self, x: VarId, stack: &str, layer: usize) -> Result<VarId> {
        let Some(group) = &self.model.active_adapter else {
            return Ok(x);
        };
        let prefix = self.model.adapter_prefix(group, stack, layer);
        let n = self.layer_norm(x, &format!("{prefix}.ln"))?;
        let down = self.linear(n, &format!("{prefix}.down.w"), &format!("{prefix}.down.b"))?;
        let act = self.tape.gelu(down)?;
        let act = self.maybe_dropout(act)?;
        let up = self.linear(act, &format!("{prefix}.up.w"), &format!("{prefix}.up.b"))?;
        self.tape.add(x, up)
    }

    fn embed(&mut self, table: &str, pos_table: &str, ln: Option<&str>, ids: &[usize]) -> Result<VarId> {
        if ids.is_empty() {
            return Err(Error::Shape("cannot embed an empty sequence".into()));
        }
        if ids.len() > self.model.cfg.max_positions {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds max_positions {}",
                ids.len(),
                self.model.cfg.max_positions
            )));
        }
        let table = self.p(table)?;
        let e = self.tape.embed_rows(table, ids)?;
        let e = self.tape.scale(e, (self.model.cfg.d_model as f64).sqrt())?;
        let pos_table = self.p(pos_table)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = self.tape.embed_rows(pos_table, &positions)?;
        let mut h = self.tape.add(e, pos)?;
        if let Some(ln) = ln {
            h = self.layer_norm(h, ln)?;
        }
        self.maybe_dropout(h)
    }

    /// Run the encoder stack over source token ids.
    pub fn encode(&mut self, src_ids: &[usize]) -> Result<VarId> {
        let cfg = &self.model.cfg;
        let ln = cfg.embed_layernorm.then_some("enc_embed_ln");
        let mut h = self.embed("src_embed", "enc_pos", ln, src_ids)?;
        for l in 0..cfg.layers {
            let slot = self.model.layer_slot(l);
            let attn = format!("enc.{slot}.attn");
            let attn_ln = format!("enc.{slot}.attn_ln");
            let ffn = format!("enc.{slot}.ffn");
            let ffn_ln = format!("enc.{slot}.ffn_ln");
            if cfg.pre_norm {
                let x = self.layer_norm(h, &attn_ln)?;
                let a = self.attention(&attn, x, x, false)?;
                let a = self.maybe_dropout(a)?;
                h = self.tape.add(h, a)?;
                let x = self.layer_norm(h, &ffn_ln)?;
                let f = self.ffn(&ffn, x)?;
                let f = self.maybe_dropout(f)?;
                h = self.tape.add(h, f)?;
            } else {
                let a = self.attention(&attn, h, h, false)?;
                let a = self.maybe_dropout(a)?;
                let s = self.tape.add(h, a)?;
                h = self.layer_norm(s, &attn_ln)?;
                let f = self.ffn(&ffn, h)?;
                let f = self.maybe_dropout(f)?;
                let s = self.tape.add(h, f)?;
                h = self.layer_norm(s, &ffn_ln)?;
            }
            h = self.adapter(h, "enc", l)?;
        }
        if cfg.pre_norm {
            h = self.layer_norm(h, "enc_final_ln")?;
        }
        Ok(h)
    }

    /// Run the decoder stack over shifted target ids against an encoded
    /// source, returning logits [T, vocab_tgt].
    pub fn decode_logits(&mut self, enc_out: VarId, tgt_in: &[usize]) -> Result<VarId> {
        let cfg = &self.model.cfg;
        let ln = cfg.embed_layernorm.then_some("dec_embed_ln");
        let mut h = self.embed("tgt_embed", "dec_pos", ln, tgt_in)?;
        for l in 0..cfg.layers {
            let slot = self.model.layer_slot(l);
            let self_attn = format!("dec.{slot}.self_attn");
            let self_ln = format!("dec.{slot}.self_ln");
            let cross_attn = format!("dec.{slot}.cross_attn");
            let cross_ln = format!("dec.{slot}.cross_ln");
            let ffn = format!("dec.{slot}.ffn");
            let ffn_ln = format!("dec.{slot}.ffn_ln");
            if cfg.pre_norm {
                let x = self.layer_norm(h, &self_ln)?;
                let a = self.attention(&self_attn, x, x, true)?;
                let a = self.maybe_dropout(a)?;
                h = self.tape.add(h, a)?;
                let x = self.layer_norm(h, &cross_ln)?;
                let a = self.attention(&cross_attn, x, enc_out, false)?;
                let a = self.maybe_dropout(a)?;
                h = self.tape.add(h, a)?;
                let x = self.layer_norm(h, &ffn_ln)?;
                let f = self.ffn(&ffn, x)?;
                let f = self.maybe_dropout(f)?;
                h = self.tape.add(h, f)?;
            } else {
                let a = self.attention(&self_attn, h, h, true)?;
                let a = self.maybe_dropout(a)?;
                let s = self.tape.add(h, a)?;
                h = self.layer_norm(s, &self_ln)?;
                let a = self.attention(&cross_attn, h, enc_out, false)?;
                let a = self.maybe_dropout(a)?;
                let s = self.tape.add(h, a)?;
                h = self.layer_norm(s, &cross_ln)?;
                let f = self.ffn(&ffn, h)?;
                let f = self.maybe_dropout(f)?;
                let s = self.tape.add(h, f)?;
                h = self.layer_norm(s, &ffn_ln)?;
            }
            h = self.adapter(h, "dec", l)?;
        }
        if cfg.pre_norm {
            h = self.layer_norm(h, "dec_final_ln")?;
        }
        self.linear(h, "out_proj.w", "out_proj.b")
    }

    /// Full forward: encode the source, decode against it.
    pub fn forward_logits(&mut self, src_ids: &[usize], tgt_in: &[usize]) -> Result<VarId> {
        let enc = self.encode(src_ids)?;
        self.decode_logits(enc, tgt_in)
    }

    /// After `tape.backward`, pull per-parameter gradients out of the
    /// binding, consuming it. Pairs are (model param index, gradient).
    pub fn take_grads(self) -> Vec<(usize, Vec<f64>)> {
        let mut out = Vec::new();
        for (idx, slot) in self.slots.iter().enumerate() {
            if let Some(id) = slot {
                if let Some(g) = self.tape.grad(*id) {
                    out.push((idx, g.to_vec()));
                }
            }
        }
        out
    }
}

impl Model {
    /// Inference-mode logits [T, vocab_tgt] as a flat row-major vector.
    pub fn logits(&self, src_ids: &[usize], tgt_in: &[usize]) -> Result<Vec<f64>> {
        let mut b = Binding::inference(self);
        let out = b.forward_logits(src_ids, tgt_in)?;
        Ok(b.tape.value(out).data.clone())
    }

    /// Add tape gradients into the parameter store.
    pub fn accumulate_grads(&mut self, grads: Vec<(usize, Vec<f64>)>) {
        for (idx, g) in grads {
            let dst = &mut self.params[idx].grad;
            debug_assert_eq!(dst.len(), g.len());
            for (d, s) in dst.iter_mut().zip(&g) {
                *d += s;
            }
        }
    }
}
