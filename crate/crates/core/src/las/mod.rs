//! Attention-based second pass: additional encoder, multi-head attention
//! decoder and lattice rescoring.

mod model;
mod rescore;

pub use model::{
    build_attention_cache, AttentionSourceCache, CacheBuilder, DecoderState, LasConfig, LasModel,
};
pub use rescore::{bench_rescore, rescore_lattice, teacher_forced_score, LatencyStats};

use crate::error::{Error, Result};
use crate::nncore::{Graph, Ops, Tensor, Var};
use crate::vocab::{TokenId, Vocab};

/// Mean teacher-forced cross-entropy over `batch`. Each item pairs a
/// shared-encoder output with its reference tokens (without `</s>`).
pub fn las_ce_loss(
    g: &mut Graph,
    model: &LasModel,
    batch: &[(&Tensor, &[TokenId])],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::contract("empty training batch"));
    }
    let w = -1.0 / batch.len() as f64;
    let mut terms = Vec::with_capacity(batch.len());
    for (e_s, tokens) in batch {
        if tokens.contains(&Vocab::EOS_ID) {
            return Err(Error::contract("reference tokens must not contain </s>"));
        }
        let (k, v) = model.source(g, e_s)?;
        terms.push(model.sequence_score(g, &k, &v, tokens, w)?);
    }
    let all = g.concat_cols(&terms)?;
    Ok(g.sum(all))
}

#[cfg(test)]
mod tests;
