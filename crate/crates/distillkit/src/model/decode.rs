//! Beam-search decoding with length-normalized scores and total,
//! documented tie-breaking.
//!
//! Semantics: at every step each live hypothesis is expanded over the full
//! target vocabulary (pad and begin-of-sequence excluded); the top `beam`
//! candidates by cumulative log-probability claim the beam slots, ties
//! broken by lower token id then earlier insertion order. A candidate that
//! chose end-of-sequence retires into the completed pool, releasing no
//! slot. With beam 1 this reduces exactly to greedy decoding. For wider
//! beams the greedy trajectory is additionally seeded into the candidate
//! pools (completed or partial as the case may be), so widening the beam
//! can never return a result worse than beam 1 (plain beam search loses
//! that guarantee when the greedy prefix is pruned mid-search). The final
//! answer is the
//! completed hypothesis with the best length-normalized score (ties keep
//! the earlier find); if nothing completed within `max_len`, the best live
//! partial is returned flagged as incomplete.

use crate::corpus::subword::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::forward::Binding;
use crate::model::params::Model;
use crate::numerics::kernels::log_softmax_rows;
use crate::numerics::tape::VarId;

pub const DEFAULT_BEAM: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated target ids; ends with EOS iff `completed`.
    pub tokens: Vec<usize>,
    /// Cumulative log-probability divided by tokens.len()^length_penalty.
    pub score: f64,
    pub completed: bool,
}

struct Partial {
    tokens: Vec<usize>,
    logp: f64,
}

fn normalized(logp: f64, len: usize, alpha: f64) -> f64 {
    logp / (len as f64).powf(alpha)
}

/// Log-probabilities over the next token given decoded prefix `tokens`.
fn next_logprobs(binding: &mut Binding, enc: VarId, tokens: &[usize]) -> Result<Vec<f64>> {
    let mut dec_in = Vec::with_capacity(tokens.len() + 1);
    dec_in.push(BOS);
    dec_in.extend_from_slice(tokens);
    let logits = binding.decode_logits(enc, &dec_in)?;
    let val = binding.tape.value(logits);
    let v = val.cols();
    let rows = val.rows();
    Ok(log_softmax_rows(&val.data[(rows - 1) * v..rows * v], 1, v))
}

/// Follow the argmax token until end-of-sequence or the length budget.
fn greedy_chain(
    binding: &mut Binding,
    enc: VarId,
    max_len: usize,
    length_penalty: f64,
) -> Result<Hypothesis> {
    let mut tokens: Vec<usize> = Vec::new();
    let mut logp = 0.0;
    for _ in 0..max_len {
        let logprobs = next_logprobs(binding, enc, &tokens)?;
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (tok, &lp) in logprobs.iter().enumerate() {
            if tok == PAD || tok == BOS {
                continue;
            }
            if lp > best.0 {
                best = (lp, tok);
            }
        }
        logp += best.0;
        tokens.push(best.1);
        if best.1 == EOS {
            return Ok(Hypothesis {
                score: normalized(logp, tokens.len(), length_penalty),
                tokens,
                completed: true,
            });
        }
    }
    Ok(Hypothesis {
        score: normalized(logp, tokens.len(), length_penalty),
        tokens,
        completed: false,
    })
}

impl Model {
    /// Decode one source sentence. `src_ids` are unified-script subword ids
    /// (without tag or terminator); the language tag, when given, is
    /// prepended and an end-of-sequence id is appended before encoding.
    pub fn decode_beam(
        &self,
        src_ids: &[usize],
        lang_tag: Option<usize>,
        beam: usize,
        max_len: usize,
        length_penalty: f64,
    ) -> Result<Hypothesis> {
        if beam == 0 {
            return Err(Error::InvalidConfig("beam size must be at least 1".into()));
        }
        if max_len == 0 {
            return Err(Error::InvalidConfig("max_len must be at least 1".into()));
        }
        let mut src = Vec::with_capacity(src_ids.len() + 2);
        if let Some(tag) = lang_tag {
            src.push(tag);
        }
        src.extend_from_slice(src_ids);
        src.push(EOS);

        let mut binding = Binding::inference(self);
        let enc = binding.encode(&src)?;

        let mut active = vec![Partial { tokens: Vec::new(), logp: 0.0 }];
        let mut best_completed: Option<Hypothesis> = None;
        let mut greedy_partial: Option<Hypothesis> = None;
        if beam > 1 {
            // Monotonicity seed: the beam-1 trajectory always competes,
            // in the completed pool or among the partial fallbacks.
            let g = greedy_chain(&mut binding, enc, max_len, length_penalty)?;
            if g.completed {
                best_completed = Some(g);
            } else {
                greedy_partial = Some(g);
            }
        }

        for _ in 0..max_len {
            // (cumulative logp, token, source beam index)
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (bi, p) in active.iter().enumerate() {
                let logprobs = next_logprobs(&mut binding, enc, &p.tokens)?;
                for (tok, lp) in logprobs.iter().enumerate() {
                    if tok == PAD || tok == BOS {
                        continue;
                    }
                    cands.push((p.logp + lp, tok, bi));
                }
            }
            cands.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .expect("log-probabilities are finite")
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let mut next: Vec<Partial> = Vec::with_capacity(beam);
            for &(logp, tok, bi) in cands.iter().take(beam) {
                if tok == EOS {
                    let mut tokens = active[bi].tokens.clone();
                    tokens.push(EOS);
                    let score = normalized(logp, tokens.len(), length_penalty);
                    let better = match &best_completed {
                        None => true,
                        Some(b) => score > b.score,
                    };
                    if better {
                        best_completed = Some(Hypothesis { tokens, score, completed: true });
                    }
                } else {
                    let mut tokens = active[bi].tokens.clone();
                    tokens.push(tok);
                    next.push(Partial { tokens, logp });
                }
            }
            active = next;
            if active.is_empty() {
                break;
            }
        }

        if let Some(h) = best_completed {
            return Ok(h);
        }
        // No completion within budget: best partial, flagged.
        let mut best: Option<Hypothesis> = greedy_partial;
        for p in active {
            let score = normalized(p.logp, p.tokens.len(), length_penalty);
            let better = match &best {
                None => true,
                Some(b) => score > b.score || (score == b.score && p.tokens < b.tokens),
            };
            if better {
                best = Some(Hypothesis { tokens: p.tokens, score, completed: false });
            }
        }
        best.ok_or_else(|| Error::Divergence("beam search produced no hypotheses".into()))
    }

    /// Greedy decoding: follow the argmax token until end-of-sequence.
    /// Used as an oracle for the beam = 1 equivalence.
    pub fn decode_greedy(
        &self,
        src_ids: &[usize],
        lang_tag: Option<usize>,
        max_len: usize,
        length_penalty: f64,
    ) -> Result<Hypothesis> {
        let mut src = Vec::with_capacity(src_ids.len() + 2);
        if let Some(tag) = lang_tag {
            src.push(tag);
        }
        src.extend_from_slice(src_ids);
        src.push(EOS);
        let mut binding = Binding::inference(self);
        let enc = binding.encode(&src)?;
        greedy_chain(&mut binding, enc, max_len, length_penalty)
    }
}
