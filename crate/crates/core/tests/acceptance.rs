//! End-to-end acceptance checks, one verdict line per criterion.
//!
//! Runs under a custom harness: `cargo test --test acceptance -- 1 5` runs
//! only criteria 1 and 5.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use twopass_core::frontend::{encode_dataset, Dataset};
use twopass_core::harness::{
    edit_distance, ep_latency, evaluate, generate_splits, percentile, run_mwer, run_train_las,
    run_train_rnnt, sweep_tradeoff, wer, ExperimentConfig, Metrics, Models, SweepConfig,
};
use twopass_core::las::{
    bench_rescore, build_attention_cache, las_ce_loss, rescore_lattice, teacher_forced_score,
    LasConfig, LasModel,
};
use twopass_core::lattice::{Hypothesis, PrefixTreeLattice, ScoreWeights};
use twopass_core::nncore::{
    gradient_check, log_add_exp, log_sum_exp, Eager, GradCheckOptions, Graph, ParamStore, Tensor,
};
use twopass_core::quant::{dequantize, quantize};
use twopass_core::rnnt::{
    apply_eos_penalty, rnnt_loss, rnnt_training_loss, streaming_beam_search, BeamOptions,
    EndpointerPenaltyConfig, ModelScorer, RnnTConfig, RnnTLogProbLattice, RnnTModel, TrainExample,
    TransducerScorer,
};
use twopass_core::training::{
    ema_update, mwer_loss, EmaState, ModelBundle, MwerConfig, MwerExample, NbestEntry,
};
use twopass_core::{Result, TokenId, Vocab};

/// Outcome of one criterion: `Ok(detail)` passes, `Err(detail)` fails.
type Verdict = std::result::Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    format!("error: {e}")
}

fn random_logprobs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let z = log_sum_exp(&logits);
    logits.iter().map(|l| l - z).collect()
}

// ---------------------------------------------------------------- 1

/// Log-probabilities of every monotone alignment path through the grid.
fn enumerate_alignments(lat: &RnnTLogProbLattice, labels: &[TokenId]) -> Vec<f64> {
    fn walk(
        lat: &RnnTLogProbLattice,
        labels: &[TokenId],
        t: usize,
        u: usize,
        acc: f64,
        out: &mut Vec<f64>,
    ) {
        let (frames, n) = (lat.frames(), labels.len());
        if u < n {
            walk(lat, labels, t, u + 1, acc + lat.get(u, t, labels[u]), out);
        }
        let blank = acc + lat.get(u, t, Vocab::BLANK_ID);
        if t + 1 < frames {
            walk(lat, labels, t + 1, u, blank, out);
        } else if u == n {
            out.push(blank);
        }
    }
    let mut out = Vec::new();
    walk(lat, labels, 0, 0, 0.0, &mut out);
    out
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let cases = 300;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let t = rng.random_range(1..=4);
        let u = rng.random_range(0..=3);
        let symbols = rng.random_range(2..=3);
        let labels: Vec<TokenId> = (0..u).map(|_| rng.random_range(1..symbols)).collect();
        let lat =
            RnnTLogProbLattice::from_fn(t, u, symbols, |_, _| random_logprobs(&mut rng, symbols));
        let want = -log_sum_exp(&enumerate_alignments(&lat, &labels));
        let got = rnnt_loss(&lat, &labels).map_err(fail)?.loss;
        worst = worst.max((got - want).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-9, format!("max |diff| {worst:e}"))?;
    check(secs < 10.0, format!("took {secs:.1} s"))?;
    Ok(format!(
        "{cases} cases, max |diff| {worst:.1e}, {secs:.2} s"
    ))
}

// ---------------------------------------------------------------- 2

fn tiny_rnnt(seed: u64, input_dim: usize, vocab: usize) -> (RnnTModel, ParamStore) {
    let cfg = RnnTConfig {
        input_dim,
        domain_onehot: None,
        encoder_layers: 2,
        encoder_hidden: 5,
        encoder_proj: 4,
        time_reduction: None,
        embed_dim: 3,
        pred_layers: 1,
        pred_hidden: 5,
        pred_proj: 4,
        joint_dim: 6,
        vocab_size: vocab,
    };
    let mut store = ParamStore::new();
    let m = RnnTModel::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (m, store)
}

fn tiny_las(seed: u64, source: usize, vocab: usize, hidden: usize) -> (LasModel, ParamStore) {
    let cfg = LasConfig {
        source_dim: source,
        encoder_layers: 2,
        encoder_hidden: hidden,
        encoder_proj: 4,
        embed_dim: 3,
        decoder_layers: 2,
        decoder_hidden: hidden,
        decoder_proj: 4,
        attention_dim: 4,
        attention_heads: 2,
        vocab_size: vocab,
    };
    let mut store = ParamStore::new();
    let m = LasModel::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (m, store)
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let opts = GradCheckOptions {
        max_coords_per_param: None,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let mut errors = Vec::new();

    let x1 = Tensor::uniform(vec![3, 3], 1.0, &mut rng);
    let x2 = Tensor::uniform(vec![5, 3], 1.0, &mut rng);
    let labels = [2, 3];
    let penalties = [
        ("rnnt", EndpointerPenaltyConfig::default()),
        (
            "rnnt+ep",
            EndpointerPenaltyConfig {
                alpha_early: 0.7,
                alpha_late: 1.3,
                t_buffer: 0,
                enabled_domains: [0].into(),
            },
        ),
    ];
    for (k, (name, ep)) in penalties.iter().enumerate() {
        let (m, store) = tiny_rnnt(20 + k as u64, 3, 4);
        let report = gradient_check(
            &store,
            |g| {
                let batch = [
                    TrainExample {
                        input: &x1,
                        labels: &labels,
                        t_eos_frame: 2,
                        domain_id: 0,
                    },
                    TrainExample {
                        input: &x2,
                        labels: &labels[..1],
                        t_eos_frame: 3,
                        domain_id: 0,
                    },
                ];
                rnnt_training_loss(g, &m, &batch, ep)
            },
            &opts,
        )
        .map_err(fail)?;
        errors.push((*name, report.max_relative_error));
    }

    let (las, store) = tiny_las(22, 3, 6, 5);
    let e1 = Tensor::uniform(vec![4, 3], 1.0, &mut rng);
    let e2 = Tensor::uniform(vec![3, 3], 1.0, &mut rng);
    let report = gradient_check(
        &store,
        |g| las_ce_loss(g, &las, &[(&e1, &[2, 3][..]), (&e2, &[5][..])]),
        &opts,
    )
    .map_err(fail)?;
    errors.push(("las-ce", report.max_relative_error));

    let entry = |tokens: Vec<TokenId>, rnnt_score: f64, errors: f64| NbestEntry {
        tokens,
        rnnt_score,
        errors,
    };
    let examples = [
        MwerExample {
            encoded: e1.clone(),
            reference: vec![2, 3],
            nbest: vec![
                entry(vec![2, 3], -1.2, 0.0),
                entry(vec![2, 4], -1.0, 1.0),
                entry(vec![5], -2.5, 2.0),
            ],
        },
        MwerExample {
            encoded: e2.clone(),
            reference: vec![4],
            nbest: vec![entry(vec![4], -0.7, 0.0), entry(vec![4, 4], -0.9, 1.0)],
        },
    ];
    let cfg = MwerConfig {
        lambda_las: 0.6,
        nbest_size: 3,
        ce_weight: 0.05,
    };
    let report = gradient_check(
        &store,
        |g| {
            let batch: Vec<&MwerExample> = examples.iter().collect();
            Ok(mwer_loss(g, &las, &batch, &cfg)?.expect("usable examples"))
        },
        &opts,
    )
    .map_err(fail)?;
    errors.push(("mwer", report.max_relative_error));

    let secs = start.elapsed().as_secs_f64();
    let detail = errors
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    for (n, e) in &errors {
        check(*e <= 1e-5, format!("{n} max relative error {e:e}"))?;
    }
    check(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!("{detail}; {secs:.1} s"))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Verdict {
    let cfg = EndpointerPenaltyConfig {
        alpha_early: 0.5,
        alpha_late: 1.0,
        t_buffer: 2,
        enabled_domains: [0].into(),
    };
    for (t, want) in [(3, 1.0), (5, 0.0), (6, 0.0), (7, 0.0), (8, 1.0)] {
        let got = cfg.penalty(t, 5);
        check(
            got == want,
            format!("penalty at t={t} is {got}, want {want}"),
        )?;
    }

    // Zero scales on random lattices.
    let zero = EndpointerPenaltyConfig {
        t_buffer: 2,
        enabled_domains: [0].into(),
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3003);
    for _ in 0..50 {
        let t = rng.random_range(1..=8);
        let mut labels: Vec<TokenId> = (0..rng.random_range(0..3))
            .map(|_| rng.random_range(2..5))
            .collect();
        labels.push(Vocab::EOS_ID);
        let lat =
            RnnTLogProbLattice::from_fn(t, labels.len(), 5, |_, _| random_logprobs(&mut rng, 5));
        let t_eos = rng.random_range(1..=t);
        let pen = apply_eos_penalty(&lat, &labels, t_eos, &zero).map_err(fail)?;
        let a = rnnt_loss(&lat, &labels).map_err(fail)?.loss;
        let b = rnnt_loss(&pen, &labels).map_err(fail)?.loss;
        check(
            a.to_bits() == b.to_bits(),
            "zero-scale lattice loss differs",
        )?;
    }

    // Through the training loss of a model.
    let (m, store) = tiny_rnnt(30, 3, 5);
    let x = Tensor::uniform(vec![6, 3], 1.0, &mut rng);
    let labels = [2, 4];
    let ex = TrainExample {
        input: &x,
        labels: &labels,
        t_eos_frame: 4,
        domain_id: 0,
    };
    let mut g = Graph::new(&store);
    let loss = rnnt_training_loss(&mut g, &m, &[ex], &zero).map_err(fail)?;
    let got = g.scalar(loss);
    let y = [2, 4, Vocab::EOS_ID];
    let e = m.encode(&store, &x).map_err(fail)?;
    let want = rnnt_loss(&m.compute_lattice(&store, &e, &y).map_err(fail)?, &y)
        .map_err(fail)?
        .loss;
    check(
        got.to_bits() == want.to_bits(),
        format!("training loss {got} vs unpenalized {want}"),
    )?;
    Ok("worked penalties exact; zero scales bit-identical on 51 instances".into())
}

// ---------------------------------------------------------------- 4

/// Scorer whose output depends on the frame and the whole label history.
struct HistoryScorer {
    seed: u64,
    frames: usize,
    symbols: usize,
}

impl TransducerScorer for HistoryScorer {
    type State = Vec<TokenId>;

    fn num_symbols(&self) -> usize {
        self.symbols
    }

    fn num_frames(&self) -> usize {
        self.frames
    }

    fn start(&self) -> Result<Vec<TokenId>> {
        Ok(Vec::new())
    }

    fn extend(&self, state: &Vec<TokenId>, token: TokenId) -> Result<Vec<TokenId>> {
        let mut s = state.clone();
        s.push(token);
        Ok(s)
    }

    fn log_probs(&self, frame: usize, state: &Vec<TokenId>) -> Result<Vec<f64>> {
        let mut key = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (frame as u64 + 1);
        for &t in state {
            key = key.wrapping_mul(31).wrapping_add(t as u64 + 7);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        Ok(random_logprobs(&mut rng, self.symbols))
    }
}

/// Total log-probability of every label sequence reachable with at most
/// `m` labels per frame.
fn brute_force<S: TransducerScorer>(s: &S, m: usize) -> BTreeMap<Vec<TokenId>, f64> {
    #[allow(clippy::too_many_arguments)]
    fn go<S: TransducerScorer>(
        s: &S,
        m: usize,
        t: usize,
        used: usize,
        state: S::State,
        tokens: Vec<TokenId>,
        acc: f64,
        out: &mut BTreeMap<Vec<TokenId>, f64>,
    ) {
        let lp = s.log_probs(t, &state).unwrap();
        let blank = acc + lp[Vocab::BLANK_ID];
        if t + 1 == s.num_frames() {
            let e = out.entry(tokens.clone()).or_insert(f64::NEG_INFINITY);
            *e = log_add_exp(*e, blank);
        } else {
            go(s, m, t + 1, 0, state.clone(), tokens.clone(), blank, out);
        }
        if used < m {
            for (k, &lp_k) in lp.iter().enumerate().skip(1) {
                let mut y = tokens.clone();
                y.push(k);
                let next = s.extend(&state, k).unwrap();
                go(s, m, t, used + 1, next, y, acc + lp_k, out);
            }
        }
    }
    let mut out = BTreeMap::new();
    go(s, m, 0, 0, s.start().unwrap(), Vec::new(), 0.0, &mut out);
    out
}

fn beam_matches_oracle<S: TransducerScorer>(s: &S, m: usize) -> std::result::Result<(), String> {
    let opts = BeamOptions {
        beam_size: 1_000_000,
        max_symbols_per_frame: m,
        eos_id: None,
        prune_margin: None,
        ..Default::default()
    };
    let r = streaming_beam_search(s, &opts).map_err(fail)?;
    let all = brute_force(s, m);
    let (tokens, score) = all
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, v)| (k.clone(), *v))
        .expect("at least the empty sequence");
    check(
        r.best().tokens == tokens,
        format!("beam {:?} vs oracle {tokens:?}", r.best().tokens),
    )?;
    check(
        (r.best().score - score).abs() <= 1e-9,
        format!("beam score {} vs oracle {score}", r.best().score),
    )
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    let n_table = 60;
    for seed in 0..n_table {
        let s = HistoryScorer {
            seed,
            frames: rng.random_range(1..=3),
            symbols: 2,
        };
        beam_matches_oracle(&s, 2).map_err(|e| format!("history model {seed}: {e}"))?;
    }
    // Trained-architecture models need `</s>` in the vocabulary, so |V| = 3.
    let n_model = 20;
    for seed in 0..n_model {
        let (m, store) = tiny_rnnt(400 + seed, 3, 3);
        let frames = rng.random_range(1..=3);
        let x = Tensor::uniform(vec![frames, 3], 1.0, &mut rng);
        let e = m.encode(&store, &x).map_err(fail)?;
        let s = ModelScorer::new(&m, &store, &e).map_err(fail)?;
        beam_matches_oracle(&s, 2).map_err(|e| format!("network model {seed}: {e}"))?;
    }
    Ok(format!(
        "{n_table} history-dependent |V|=2 models and {n_model} network models match brute force"
    ))
}

// ---------------------------------------------------------------- 5

fn random_hyps(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<Hypothesis> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(0..6);
            let tokens: Vec<TokenId> = (0..len).map(|_| rng.random_range(2..vocab)).collect();
            let logps = tokens.iter().map(|_| rng.random_range(-3.0..0.0)).collect();
            let mut h = Hypothesis::from_tokens(tokens, logps);
            h.score -= rng.random_range(0.0..2.0);
            h
        })
        .collect()
}

fn criterion_5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5005);
    let vocab = 7;
    let mut worst_arc: f64 = 0.0;
    for i in 0..100 {
        let (las, store) = tiny_las(500 + i % 10, 3, vocab, 5);
        let frames = rng.random_range(1..8);
        let e_s = Tensor::uniform(vec![frames, 3], 1.0, &mut rng);
        let cache = build_attention_cache(&las, &store, &e_s).map_err(fail)?;
        let n = rng.random_range(1..10);
        let lat = PrefixTreeLattice::from_beam_hypotheses(&random_hyps(&mut rng, n, vocab))
            .map_err(fail)?;
        let (mut a, mut b) = (lat.clone(), lat);
        rescore_lattice(&las, &store, &mut a, &cache, true).map_err(fail)?;
        rescore_lattice(&las, &store, &mut b, &cache, false).map_err(fail)?;
        for (x, y) in a.arcs().iter().zip(b.arcs()) {
            worst_arc = worst_arc.max((x.las_logp.unwrap() - y.las_logp.unwrap()).abs());
        }
        for (x, y) in a.nodes().iter().zip(b.nodes()) {
            if let (Some(fx), Some(fy)) = (x.final_weight, y.final_weight) {
                worst_arc = worst_arc.max((fx.las.unwrap() - fy.las.unwrap()).abs());
            }
        }
        for lambda in [0.0, 0.3, 0.7, 1.0] {
            let w = ScoreWeights::new(lambda).map_err(fail)?;
            let pa = a.best_path(&w).map_err(fail)?.tokens;
            let pb = b.best_path(&w).map_err(fail)?.tokens;
            check(
                pa == pb,
                format!("lattice {i}: best paths differ at lambda {lambda}"),
            )?;
        }
    }
    check(worst_arc <= 1e-6, format!("(a) max arc diff {worst_arc:e}"))?;

    let mut worst_cache: f64 = 0.0;
    for seed in 0..10 {
        let (las, store) = tiny_las(550 + seed, 3, vocab, 5);
        let e_s = Tensor::uniform(vec![rng.random_range(1..15), 3], 1.0, &mut rng);
        let streamed = build_attention_cache(&las, &store, &e_s).map_err(fail)?;
        let mut o = Eager::new(&store);
        let (k, v) = las.source(&mut o, &e_s).map_err(fail)?;
        worst_cache = worst_cache
            .max(streamed.keys.max_abs_diff(&k))
            .max(streamed.values.max_abs_diff(&v));
    }
    check(
        worst_cache <= 1e-12,
        format!("(b) cache diff {worst_cache:e}"),
    )?;

    let mut worst_chain: f64 = 0.0;
    for seed in 0..20 {
        let (las, store) = tiny_las(580 + seed, 3, vocab, 5);
        let e_s = Tensor::uniform(vec![rng.random_range(1..10), 3], 1.0, &mut rng);
        let cache = build_attention_cache(&las, &store, &e_s).map_err(fail)?;
        let tokens: Vec<TokenId> = (0..rng.random_range(0..7))
            .map(|_| rng.random_range(2..vocab))
            .collect();
        let logps = vec![-0.5; tokens.len()];
        let mut lat = PrefixTreeLattice::from_beam_hypotheses(&[Hypothesis::from_tokens(
            tokens.clone(),
            logps,
        )])
        .map_err(fail)?;
        rescore_lattice(&las, &store, &mut lat, &cache, true).map_err(fail)?;
        let path: f64 = lat.arcs().iter().map(|a| a.las_logp.unwrap()).sum();
        let end = lat.terminals()[0];
        let total = path + lat.node(end).final_weight.unwrap().las.unwrap();
        let want = teacher_forced_score(&las, &store, &cache, &tokens).map_err(fail)?;
        worst_chain = worst_chain.max((total - want).abs());
    }
    check(
        worst_chain <= 1e-9,
        format!("(c) chain diff {worst_chain:e}"),
    )?;
    Ok(format!(
        "(a) 100 lattices, max diff {worst_arc:.1e}; (b) {worst_cache:.1e}; (c) {worst_chain:.1e}"
    ))
}

// ---------------------------------------------------------------- 6 and 7

/// Models and data shared by the end-to-end criteria.
struct EndToEnd {
    cfg: ExperimentConfig,
    eval: Dataset,
    /// One-hot first pass with its LAS second pass.
    bundle: ModelBundle,
    no_onehot: ModelBundle,
    train_secs: f64,
}

fn end_to_end() -> &'static std::result::Result<EndToEnd, String> {
    static CELL: OnceLock<std::result::Result<EndToEnd, String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let cfg = ExperimentConfig::default();
        let seed = 7;
        let splits = generate_splits(&cfg, seed).map_err(fail)?;
        let onehot = run_train_rnnt(&cfg, seed, &splits.train).map_err(fail)?;
        let mut plain_cfg = cfg.clone();
        plain_cfg.rnnt.domain_onehot = false;
        let plain = run_train_rnnt(&plain_cfg, seed, &splits.train).map_err(fail)?;
        let (bundle, _) = run_train_las(&cfg, seed, &onehot.bundle, &splits.train).map_err(fail)?;
        Ok(EndToEnd {
            cfg,
            eval: splits.eval,
            bundle,
            no_onehot: plain.bundle,
            train_secs: start.elapsed().as_secs_f64(),
        })
    })
}

fn point(pen: f64, eos: bool, vad: Option<u32>) -> SweepConfig {
    SweepConfig {
        eos_decode_penalty: pen,
        lambda_las: 0.0,
        eos_endpointing: eos,
        vad_interval_ms: vad,
    }
}

fn criterion_6() -> Verdict {
    let start = Instant::now();
    let e2e = end_to_end().as_ref().map_err(Clone::clone)?;
    let cfg = &e2e.cfg;
    let mut notes = Vec::new();

    let full =
        evaluate(cfg, &e2e.bundle, &e2e.eval, &cfg.decode, &cfg.eval.lambdas).map_err(fail)?;
    let first = full.first_pass.wer;
    notes.push(format!("first-pass WER {first:.2}%"));
    check(first <= 5.0, format!("first-pass WER {first:.2}% above 5%"))?;

    let plain = evaluate(cfg, &e2e.no_onehot, &e2e.eval, &cfg.decode, &[]).map_err(fail)?;
    let plain_wer = plain.first_pass.wer;
    notes.push(format!("(a) no one-hot {plain_wer:.2}%"));
    check(
        first < plain_wer,
        format!("(a) one-hot {first:.2}% not below no one-hot {plain_wer:.2}%"),
    )?;

    let (best_lambda, best) = full
        .rescored
        .iter()
        .min_by(|a, b| a.1.wer.total_cmp(&b.1.wer))
        .map(|(l, m)| (*l, m.wer))
        .ok_or("(b) no rescoring rows")?;
    let positive_best = full
        .rescored
        .iter()
        .filter(|(l, _)| *l > 0.0)
        .map(|(_, m)| m.wer)
        .fold(f64::INFINITY, f64::min);
    notes.push(format!(
        "(b) best lambda {best_lambda} at {best:.2}%, lambda>0 {}",
        if positive_best < first {
            "improves"
        } else {
            "does not improve"
        }
    ));
    check(
        best <= first,
        format!("(b) sweep minimum {best:.2}% above first pass"),
    )?;

    // Penalty sweep on the endpointed domain with `</s>` as the only closer.
    let models = Models::bind(&e2e.bundle).map_err(fail)?;
    let first_pass = models.first(&e2e.bundle);
    let enabled = e2e.eval.subset(|u| cfg.endpointer.enabled_for(u.domain_id));
    let grid: Vec<SweepConfig> = [0.0, 1.0, 2.0, 4.0]
        .iter()
        .map(|&p| point(p, true, None))
        .collect();
    let sweep = sweep_tradeoff(first_pass, None, &enabled, &cfg.decode, &grid).map_err(fail)?;
    let medians: Vec<Option<usize>> = sweep.points.iter().map(|p| p.median_close_frame).collect();
    notes.push(format!("(c) median close frames {medians:?}"));
    check(
        medians.iter().all(Option::is_some) && medians.windows(2).all(|w| w[0] <= w[1]),
        format!("(c) median close frames {medians:?} not non-decreasing"),
    )?;

    let vad_ms = cfg
        .decode
        .vad
        .clone()
        .unwrap_or_default()
        .silence_interval_ms;
    let grid = [
        point(0.0, true, Some(vad_ms)),
        point(0.0, false, Some(vad_ms)),
        point(0.0, false, None),
    ];
    let sweep = sweep_tradeoff(first_pass, None, &e2e.eval, &cfg.decode, &grid).map_err(fail)?;
    let [joint, vad, none]: [&Metrics; 3] = [
        &sweep.points[0].metrics,
        &sweep.points[1].metrics,
        &sweep.points[2].metrics,
    ];
    notes.push(format!(
        "(d) EP50 joint {} ms vs VAD {} ms; WER joint {:.2}% vs no-EP {:.2}% ({:+.2})",
        joint.ep50_ms,
        vad.ep50_ms,
        joint.wer,
        none.wer,
        joint.wer - none.wer
    ));
    check(
        joint.ep50_ms < vad.ep50_ms,
        format!(
            "(d) joint EP50 {} not below VAD {}",
            joint.ep50_ms, vad.ep50_ms
        ),
    )?;

    let total = e2e.train_secs + start.elapsed().as_secs_f64();
    notes.push(format!("{:.0} s total", total));
    check(total <= 900.0, format!("took {total:.0} s"))?;
    Ok(notes.join("; "))
}

fn criterion_7() -> Verdict {
    // EMA.
    let store = |v: f64| {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::row_vector(vec![v])).unwrap();
        s
    };
    let first = |s: &ParamStore| s.get(s.ids().next().unwrap()).data()[0];
    let ones = store(1.0);
    let copy = ema_update(EmaState::new(&store(5.0), 0.0).unwrap(), &ones).map_err(fail)?;
    check(first(&copy.shadow) == 1.0, "EMA decay 0")?;
    let keep = ema_update(EmaState::new(&store(5.0), 1.0).unwrap(), &ones).map_err(fail)?;
    check(first(&keep.shadow) == 5.0, "EMA decay 1")?;
    let mut ema = EmaState::new(&store(0.0), 0.9).unwrap();
    for _ in 0..2 {
        ema = ema_update(ema, &ones).map_err(fail)?;
    }
    check((first(&ema.shadow) - 0.19).abs() < 1e-15, "EMA two updates")?;

    // Quantization.
    let q = quantize(&Tensor::zeros(vec![2, 3])).map_err(fail)?;
    check(
        q.scale == 1.0 && q.codes.iter().all(|&c| c == 0),
        "zero tensor",
    )?;
    let q = quantize(&Tensor::row_vector(vec![0.5, -2.54, 1.0])).map_err(fail)?;
    check(
        q.codes[1] == -127 && (q.scale - 0.02).abs() < 1e-15,
        "max 2.54",
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(7007);
    for i in 0..1000 {
        let n = rng.random_range(1..64);
        let range = rng.random_range(1e-3..10.0);
        let t = Tensor::uniform(vec![1, n], range, &mut rng);
        let q = quantize(&t).map_err(fail)?;
        let err = dequantize(&q).max_abs_diff(&t);
        check(
            err <= q.scale / 2.0,
            format!("round trip {i}: {err} > scale/2"),
        )?;
    }

    // Edit distance and WER.
    let (a, b, c, x, d) = ("a", "b", "c", "x", "d");
    let s = edit_distance(&[a, b, c], &[a, b, c]);
    check(
        (s.distance, s.sub, s.ins, s.del) == (0, 0, 0, 0),
        "identical",
    )?;
    let s = edit_distance::<&str>(&[a, b, c], &[]);
    check(
        (s.distance, s.sub, s.ins, s.del) == (3, 0, 0, 3),
        "all deletions",
    )?;
    let s = edit_distance(&[a, b, c], &[a, x, c, d]);
    check(
        (s.distance, s.sub, s.ins, s.del) == (2, 1, 1, 0),
        "mixed alignment",
    )?;
    let perfect = wer(&[(vec![1, 2], vec![1, 2])]).map_err(fail)?;
    check(perfect.wer == 0.0, "perfect WER")?;
    let one = wer(&[(vec![1, 2, 3, 4], vec![1, 9, 3, 4])]).map_err(fail)?;
    check(one.wer == 25.0, "one substitution")?;
    // Pooled: (1 + 2 + 0) errors over (2 + 3 + 5) words.
    let pooled = wer(&[
        (vec![1, 2], vec![1, 3]),
        (vec![1, 2, 3], vec![1]),
        (vec![1, 2, 3, 4, 5], vec![1, 2, 3, 4, 5]),
    ])
    .map_err(fail)?;
    check((pooled.wer - 30.0).abs() < 1e-12, "pooled WER")?;

    // Latency and percentiles.
    check(ep_latency(22, 600, 30) == 60.0, "EP latency")?;
    check(ep_latency(20, 600, 30) == 0.0, "EP latency at speech end")?;
    check(ep_latency(18, 600, 30) == -60.0, "early cutoff")?;
    let ten: Vec<f64> = (1..=10).map(f64::from).collect();
    check(
        percentile(&[5.0], 90.0).map_err(fail)? == 5.0,
        "single value",
    )?;
    check(percentile(&ten, 50.0).map_err(fail)? == 5.0, "p50")?;
    check(percentile(&ten, 90.0).map_err(fail)? == 9.0, "p90")?;

    // Quantized inference on the trained first pass.
    let e2e = end_to_end().as_ref().map_err(Clone::clone)?;
    let first_only = ModelBundle {
        las: None,
        ..e2e.bundle.clone()
    };
    let ckpt = first_only.to_checkpoint().map_err(fail)?;
    let quant = ModelBundle::from_checkpoint(&ckpt.to_quantized().map_err(fail)?).map_err(fail)?;
    let cfg = &e2e.cfg;
    let float = evaluate(cfg, &first_only, &e2e.eval, &cfg.decode, &[]).map_err(fail)?;
    let qeval = evaluate(cfg, &quant, &e2e.eval, &cfg.decode, &[]).map_err(fail)?;
    let delta = qeval.first_pass.wer - float.first_pass.wer;
    check(
        delta <= 0.5,
        format!("quantized WER degrades by {delta:.2} points"),
    )?;
    Ok(format!(
        "unit examples exact; 1000 round trips within scale/2; WER float {:.2}% vs int8 {:.2}% ({delta:+.2})",
        float.first_pass.wer, qeval.first_pass.wer
    ))
}

// ---------------------------------------------------------------- 8

/// Bytes of every artifact one small run produces.
fn small_run() -> Result<Vec<(String, Vec<u8>)>> {
    let mut cfg = ExperimentConfig::default();
    cfg.data.train_count = 60;
    cfg.data.eval_count = 20;
    cfg.train_rnnt.max_steps = 30;
    cfg.train_las.max_steps = 20;
    cfg.train_mwer.max_steps = 3;
    let seed = 11;
    let splits = generate_splits(&cfg, seed)?;
    let rnnt = run_train_rnnt(&cfg, seed, &splits.train)?;
    let (las, _) = run_train_las(&cfg, seed, &rnnt.bundle, &splits.train)?;
    let (mwer, _) = run_mwer(&cfg, seed, &las, &splits.train)?;
    let ev = evaluate(&cfg, &las, &splits.eval, &cfg.decode, &cfg.eval.lambdas)?;
    let models = Models::bind(&las)?;
    let sweep = sweep_tradeoff(
        models.first(&las),
        models.second(&las),
        &splits.eval,
        &cfg.decode,
        &cfg.sweep.grid,
    )?;
    Ok(vec![
        ("train data".into(), encode_dataset(&splits.train)?),
        (
            "rnnt checkpoint".into(),
            rnnt.bundle.to_checkpoint()?.encode()?,
        ),
        ("las checkpoint".into(), las.to_checkpoint()?.encode()?),
        ("mwer checkpoint".into(), mwer.to_checkpoint()?.encode()?),
        ("metrics csv".into(), ev.csv().into_bytes()),
        ("sweep csv".into(), sweep.csv().into_bytes()),
    ])
}

fn criterion_8() -> Verdict {
    let a = small_run().map_err(fail)?;
    let b = small_run().map_err(fail)?;
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        check(x == y, format!("{name} differs between runs"))?;
    }
    Ok(format!(
        "{} artifacts byte-identical across two runs",
        a.len()
    ))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9009);
    let vocab = 24;
    let mut store = ParamStore::new();
    let las = LasModel::new(LasConfig::toy(32, vocab), &mut store, &mut rng).map_err(fail)?;
    let e_s = Tensor::uniform(vec![40, 32], 1.0, &mut rng);
    let cache = build_attention_cache(&las, &store, &e_s).map_err(fail)?;
    let items: Vec<(PrefixTreeLattice, _)> = (0..20)
        .map(|_| {
            // Eight distinct first tokens give the root eight sibling arcs.
            let hyps: Vec<Hypothesis> = (0..8)
                .map(|k| {
                    let mut tokens = vec![2 + k];
                    tokens.extend((0..rng.random_range(2..6)).map(|_| rng.random_range(2..vocab)));
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
    let unbatched = bench_rescore(&las, &store, &items, false, 3).map_err(fail)?;
    let batched = bench_rescore(&las, &store, &items, true, 3).map_err(fail)?;
    let detail = format!(
        "median batched {:.3} ms vs unbatched {:.3} ms",
        batched.p50_ms, unbatched.p50_ms
    );
    if batched.p50_ms <= unbatched.p50_ms {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- driver

/// Toy-scale synthetic run used by criterion 6 also feeds criterion 7, so
/// they share one training pass.
fn main() {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    // (number, check, hard)
    type Criterion = (usize, fn() -> Verdict, bool);
    let criteria: [Criterion; 9] = [
        (1, criterion_1, true),
        (2, criterion_2, true),
        (3, criterion_3, true),
        (4, criterion_4, true),
        (5, criterion_5, true),
        (6, criterion_6, true),
        (7, criterion_7, true),
        (8, criterion_8, true),
        (9, criterion_9, false),
    ];
    let mut failed = Vec::new();
    let mut out = std::io::stdout();
    for (n, run, hard) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let verdict = run();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match (&verdict, hard) {
            (Ok(d), _) => ("PASS", d),
            (Err(d), true) => ("FAIL", d),
            (Err(d), false) => ("WARN", d),
        };
        writeln!(out, "criterion {n}: {tag} ({secs:.1} s) {detail}").unwrap();
        out.flush().unwrap();
        if tag == "FAIL" {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        writeln!(out, "failed criteria: {failed:?}").unwrap();
        std::process::exit(1);
    }
}
