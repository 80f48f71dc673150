//! Randomly initialized fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twopass_core::las::{build_attention_cache, AttentionSourceCache, LasConfig, LasModel};
use twopass_core::lattice::{Hypothesis, PrefixTreeLattice};
use twopass_core::nncore::{log_sum_exp, ParamStore, Tensor};
use twopass_core::rnnt::{RnnTConfig, RnnTLogProbLattice, RnnTModel};
use twopass_core::TokenId;

pub const VOCAB: usize = 24;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Normalized random grid plus labels drawn from the non-blank symbols.
pub fn loss_lattice(frames: usize, labels: usize) -> (RnnTLogProbLattice, Vec<TokenId>) {
    let mut r = rng(1);
    let y = (0..labels).map(|_| r.random_range(2..VOCAB)).collect();
    let lat = RnnTLogProbLattice::from_fn(frames, labels, VOCAB, |_, _| {
        let logits: Vec<f64> = (0..VOCAB).map(|_| r.random_range(-3.0..3.0)).collect();
        let z = log_sum_exp(&logits);
        logits.iter().map(|l| l - z).collect()
    });
    (lat, y)
}

/// Toy-size first pass and an encoded random input of `frames` frames.
pub fn first_pass(frames: usize) -> (RnnTModel, ParamStore, Tensor) {
    let mut r = rng(2);
    let mut store = ParamStore::new();
    let model = RnnTModel::new(RnnTConfig::toy(40, VOCAB), &mut store, &mut r).unwrap();
    let x = Tensor::uniform(vec![frames, 40], 1.0, &mut r);
    let encoded = model.encode(&store, &x).unwrap();
    (model, store, encoded)
}

/// Toy-size second pass, its attention cache, and lattices whose root has
/// `fanout` sibling arcs.
pub fn rescore_fixture(
    lattices: usize,
    fanout: usize,
) -> (
    LasModel,
    ParamStore,
    Vec<(PrefixTreeLattice, AttentionSourceCache)>,
) {
    let mut r = rng(3);
    let mut store = ParamStore::new();
    let las = LasModel::new(LasConfig::toy(32, VOCAB), &mut store, &mut r).unwrap();
    let e_s = Tensor::uniform(vec![40, 32], 1.0, &mut r);
    let cache = build_attention_cache(&las, &store, &e_s).unwrap();
    let items = (0..lattices)
        .map(|_| {
            let hyps: Vec<Hypothesis> = (0..fanout)
                .map(|k| {
                    let mut tokens = vec![2 + k % (VOCAB - 2)];
                    tokens.extend((0..r.random_range(2..6)).map(|_| r.random_range(2..VOCAB)));
                    let logps = vec![-0.3; tokens.len()];
                    Hypothesis::from_tokens(tokens, logps)
                })
                .collect();
            (
                PrefixTreeLattice::from_beam_hypotheses(&hyps).unwrap(),
                cache.clone(),
            )
        })
        .collect();
    (las, store, items)
}
