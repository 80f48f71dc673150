use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::lattice::{Hypothesis, PrefixTreeLattice};
use crate::nncore::{gradient_check, Eager, GradCheckOptions, ParamStore};

fn tiny(source: usize, vocab: usize) -> LasConfig {
    LasConfig {
        source_dim: source,
        encoder_layers: 2,
        encoder_hidden: 5,
        encoder_proj: 4,
        embed_dim: 3,
        decoder_layers: 2,
        decoder_hidden: 5,
        decoder_proj: 4,
        attention_dim: 4,
        attention_heads: 2,
        vocab_size: vocab,
    }
}

fn setup(seed: u64, frames: usize) -> (ParamStore, LasModel, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = LasModel::new(tiny(3, 6), &mut store, &mut rng).unwrap();
    let e_s = Tensor::uniform(vec![frames, 3], 1.0, &mut rng);
    (store, model, e_s)
}

fn random_hyps(rng: &mut ChaCha8Rng, n: usize) -> Vec<Hypothesis> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(0..5);
            let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(2..6)).collect();
            let logps = tokens.iter().map(|_| rng.random_range(-3.0..0.0)).collect();
            let mut h = Hypothesis::from_tokens(tokens, logps);
            h.score -= rng.random_range(0.0..2.0);
            h
        })
        .collect()
}

#[test]
fn streaming_cache_matches_full_recompute() {
    let (store, model, e_s) = setup(1, 9);
    let streamed = build_attention_cache(&model, &store, &e_s).unwrap();
    let mut o = Eager::new(&store);
    let (k, v) = model.source(&mut o, &e_s).unwrap();
    assert_eq!(streamed.len(), 9);
    assert!(streamed.keys.max_abs_diff(&k) <= 1e-12);
    assert!(streamed.values.max_abs_diff(&v) <= 1e-12);

    // Prefix snapshots are prefixes of the full cache.
    let mut b = model.cache_builder(&store);
    for t in 0..4 {
        b.push(&model, &store, e_s.row(t)).unwrap();
    }
    let part = b.snapshot(&model).unwrap();
    for t in 0..4 {
        assert_eq!(part.keys.row(t), streamed.keys.row(t));
    }
}

#[test]
fn batched_and_unbatched_rescoring_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..10 {
        let (store, model, e_s) = setup(seed, 6);
        let cache = build_attention_cache(&model, &store, &e_s).unwrap();
        let lat = PrefixTreeLattice::from_beam_hypotheses(&random_hyps(&mut rng, 6)).unwrap();
        let mut a = lat.clone();
        let mut b = lat.clone();
        rescore_lattice(&model, &store, &mut a, &cache, true).unwrap();
        rescore_lattice(&model, &store, &mut b, &cache, false).unwrap();
        for (x, y) in a.arcs().iter().zip(b.arcs()) {
            assert!((x.las_logp.unwrap() - y.las_logp.unwrap()).abs() <= 1e-6);
        }
        for (x, y) in a.nodes().iter().zip(b.nodes()) {
            if let (Some(fx), Some(fy)) = (x.final_weight, y.final_weight) {
                assert!((fx.las.unwrap() - fy.las.unwrap()).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn chain_lattice_equals_teacher_forcing() {
    let (store, model, e_s) = setup(3, 7);
    let cache = build_attention_cache(&model, &store, &e_s).unwrap();
    let tokens = vec![2, 4, 4, 3, 5];
    let mut lat = PrefixTreeLattice::from_beam_hypotheses(&[Hypothesis::from_tokens(
        tokens.clone(),
        vec![-0.5; 5],
    )])
    .unwrap();
    rescore_lattice(&model, &store, &mut lat, &cache, true).unwrap();
    let path: f64 = lat.arcs().iter().map(|a| a.las_logp.unwrap()).sum();
    let last = lat.terminals()[0];
    let total = path + lat.node(last).final_weight.unwrap().las.unwrap();
    let want = teacher_forced_score(&model, &store, &cache, &tokens).unwrap();
    assert!((total - want).abs() <= 1e-9, "{total} vs {want}");

    let mut g = crate::nncore::Graph::new(&store);
    let (k, v) = model.source(&mut g, &e_s).unwrap();
    let s = model.sequence_score(&mut g, &k, &v, &tokens, 1.0).unwrap();
    assert!((g.scalar(s) - want).abs() <= 1e-9);
}

#[test]
fn rescoring_leaves_first_pass_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (store, model, e_s) = setup(4, 5);
    let cache = build_attention_cache(&model, &store, &e_s).unwrap();
    let lat = PrefixTreeLattice::from_beam_hypotheses(&random_hyps(&mut rng, 8)).unwrap();
    let mut out = lat.clone();
    rescore_lattice(&model, &store, &mut out, &cache, true).unwrap();
    for (x, y) in lat.arcs().iter().zip(out.arcs()) {
        assert_eq!(x.rnnt_logp.to_bits(), y.rnnt_logp.to_bits());
        assert_eq!((x.from, x.to, x.token), (y.from, y.to, y.token));
    }
    for (x, y) in lat.nodes().iter().zip(out.nodes()) {
        assert_eq!(
            x.final_weight.map(|f| f.rnnt),
            y.final_weight.map(|f| f.rnnt)
        );
    }
}

#[test]
fn rescoring_errors() {
    let (store, model, e_s) = setup(2, 3);
    let cache = build_attention_cache(&model, &store, &e_s).unwrap();
    let empty = build_attention_cache(&model, &store, &Tensor::zeros(vec![0, 3])).unwrap();
    let mut lat =
        PrefixTreeLattice::from_beam_hypotheses(&[Hypothesis::from_tokens(vec![2], vec![-1.0])])
            .unwrap();
    assert!(matches!(
        rescore_lattice(&model, &store, &mut lat, &empty, true),
        Err(crate::Error::EmptySource)
    ));
    let mut with_eos = PrefixTreeLattice::from_beam_hypotheses(&[Hypothesis::from_tokens(
        vec![2, 1],
        vec![-1.0, -1.0],
    )])
    .unwrap();
    assert!(matches!(
        rescore_lattice(&model, &store, &mut with_eos, &cache, true),
        Err(crate::Error::Contract(_))
    ));
}

#[test]
fn ce_loss_gradient_check() {
    let (store, model, e_s) = setup(6, 4);
    let e2 = e_s.map(|v| v * 0.5);
    let opts = GradCheckOptions {
        max_coords_per_param: Some(6),
        ..Default::default()
    };
    let report = gradient_check(
        &store,
        |g| las_ce_loss(g, &model, &[(&e_s, &[2, 3][..]), (&e2, &[5][..])]),
        &opts,
    )
    .unwrap();
    assert!(report.max_relative_error <= 1e-5, "{report:?}");
}

#[test]
fn ce_loss_is_mean_negative_log_prob() {
    let (store, model, e_s) = setup(8, 4);
    let cache = build_attention_cache(&model, &store, &e_s).unwrap();
    let mut g = crate::nncore::Graph::new(&store);
    let loss = las_ce_loss(&mut g, &model, &[(&e_s, &[2, 3][..]), (&e_s, &[4][..])]).unwrap();
    let a = teacher_forced_score(&model, &store, &cache, &[2, 3]).unwrap();
    let b = teacher_forced_score(&model, &store, &cache, &[4]).unwrap();
    assert!((g.scalar(loss) + (a + b) / 2.0).abs() < 1e-9);
}

#[test]
fn bench_reports_every_utterance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (store, model, e_s) = setup(1, 4);
    let cache = build_attention_cache(&model, &store, &e_s).unwrap();
    let items: Vec<_> = (0..3)
        .map(|_| {
            (
                PrefixTreeLattice::from_beam_hypotheses(&random_hyps(&mut rng, 4)).unwrap(),
                cache.clone(),
            )
        })
        .collect();
    let stats = bench_rescore(&model, &store, &items, true, 2).unwrap();
    assert_eq!(stats.per_utterance_ms.len(), 3);
    assert!(stats.p50_ms <= stats.p90_ms);
}
