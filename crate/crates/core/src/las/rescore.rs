use std::sync::Arc;
use std::time::Instant;

use super::model::{AttentionSourceCache, DecoderState, LasModel};
use crate::error::{Error, Result};
use crate::harness::percentile;
use crate::lattice::{NodeId, PrefixTreeLattice};
use crate::nncore::{Eager, LstmState, Ops, ParamStore, Tensor};
use crate::vocab::{TokenId, Vocab};

type State = DecoderState<Arc<Tensor>>;

/// Expands a one-row state to `n` identical rows.
fn replicate(o: &mut Eager, s: &State, n: usize) -> Result<State> {
    let idx = vec![0; n];
    let lstm = s
        .lstm
        .iter()
        .map(|l| {
            Ok(LstmState {
                cell: o.gather_rows(&l.cell, &idx)?,
                hidden: o.gather_rows(&l.hidden, &idx)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DecoderState {
        lstm,
        context: o.gather_rows(&s.context, &idx)?,
    })
}

fn row_of(o: &mut Eager, s: &State, r: usize) -> Result<State> {
    let lstm = s
        .lstm
        .iter()
        .map(|l| {
            Ok(LstmState {
                cell: o.gather_rows(&l.cell, &[r])?,
                hidden: o.gather_rows(&l.hidden, &[r])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DecoderState {
        lstm,
        context: o.gather_rows(&s.context, &[r])?,
    })
}

/// Advances `state` by each token in `tokens`. Returns one state and one
/// log-probability row per token.
fn expand(
    model: &LasModel,
    o: &mut Eager,
    state: &State,
    tokens: &[TokenId],
    keys: &Arc<Tensor>,
    values: &Arc<Tensor>,
    batched: bool,
) -> Result<Vec<(State, Vec<f64>)>> {
    if batched {
        let rep = replicate(o, state, tokens.len())?;
        let (next, logp) = model.step(o, &rep, tokens, keys, values)?;
        (0..tokens.len())
            .map(|r| Ok((row_of(o, &next, r)?, logp.row(r).to_vec())))
            .collect()
    } else {
        tokens
            .iter()
            .map(|&tok| {
                let (next, logp) = model.step(o, state, &[tok], keys, values)?;
                Ok((next, logp.row(0).to_vec()))
            })
            .collect()
    }
}

/// Fills the LAS scores of every arc and terminal by teacher forcing along
/// the prefix tree, depth first. Each node's decoder state is computed once;
/// with `batched`, sibling expansions share one `K`-row step. First-pass
/// scores are left untouched.
pub fn rescore_lattice(
    model: &LasModel,
    store: &ParamStore,
    lattice: &mut PrefixTreeLattice,
    cache: &AttentionSourceCache,
    batched: bool,
) -> Result<()> {
    if cache.is_empty() {
        return Err(Error::EmptySource);
    }
    if lattice.arcs().iter().any(|a| a.token == Vocab::EOS_ID) {
        return Err(Error::contract(
            "strip </s> from the lattice before rescoring",
        ));
    }
    let mut o = Eager::new(store);
    let keys = o.constant(cache.keys.clone());
    let values = o.constant(cache.values.clone());
    let init = model.initial_state(&mut o, 1);
    let (root_state, root_logp) = expand(
        model,
        &mut o,
        &init,
        &[Vocab::BLANK_ID],
        &keys,
        &values,
        batched,
    )?
    .pop()
    .expect("one expansion");
    let mut stack: Vec<(NodeId, State, Vec<f64>)> =
        vec![(PrefixTreeLattice::ROOT, root_state, root_logp)];
    while let Some((node, state, logp)) = stack.pop() {
        if lattice.node(node).final_weight.is_some() {
            lattice.set_final_las(node, logp[Vocab::EOS_ID])?;
        }
        let children = lattice.node(node).children.clone();
        if children.is_empty() {
            continue;
        }
        let tokens: Vec<TokenId> = children.iter().map(|&a| lattice.arc(a).token).collect();
        for (&a, &tok) in children.iter().zip(&tokens) {
            lattice.set_las_logp(a, logp[tok]);
        }
        let expanded = expand(model, &mut o, &state, &tokens, &keys, &values, batched)?;
        for (&a, (s, lp)) in children.iter().zip(expanded).rev() {
            stack.push((lattice.arc(a).to, s, lp));
        }
    }
    Ok(())
}

/// Teacher-forced LAS log-probability of `tokens` followed by `</s>`.
pub fn teacher_forced_score(
    model: &LasModel,
    store: &ParamStore,
    cache: &AttentionSourceCache,
    tokens: &[TokenId],
) -> Result<f64> {
    if cache.is_empty() {
        return Err(Error::EmptySource);
    }
    let mut o = Eager::new(store);
    let keys = o.constant(cache.keys.clone());
    let values = o.constant(cache.values.clone());
    let mut state = model.initial_state(&mut o, 1);
    let mut prev = Vocab::BLANK_ID;
    let mut total = 0.0;
    for &target in tokens.iter().chain([&Vocab::EOS_ID]) {
        let (next, logp) = model.step(&mut o, &state, &[prev], &keys, &values)?;
        total += logp.get(0, target);
        state = next;
        prev = target;
    }
    Ok(total)
}

/// Per-utterance rescoring wall time.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyStats {
    pub per_utterance_ms: Vec<f64>,
    pub p50_ms: f64,
    pub p90_ms: f64,
}

/// Times `rescore_lattice` per utterance, averaged over `repeats` runs.
/// Cache construction is not timed.
pub fn bench_rescore(
    model: &LasModel,
    store: &ParamStore,
    items: &[(PrefixTreeLattice, AttentionSourceCache)],
    batched: bool,
    repeats: usize,
) -> Result<LatencyStats> {
    if items.is_empty() {
        return Err(Error::contract("no lattices to benchmark"));
    }
    let repeats = repeats.max(1);
    let mut per = Vec::with_capacity(items.len());
    for (lat, cache) in items {
        let mut work = lat.clone();
        let start = Instant::now();
        for _ in 0..repeats {
            work.clear_las();
            rescore_lattice(model, store, &mut work, cache, batched)?;
        }
        per.push(start.elapsed().as_secs_f64() * 1e3 / repeats as f64);
    }
    Ok(LatencyStats {
        p50_ms: percentile(&per, 50.0)?,
        p90_ms: percentile(&per, 90.0)?,
        per_utterance_ms: per,
    })
}
