use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::model::{PredState, RnnTModel};
use crate::error::{Error, Result};
use crate::lattice::{Hypothesis, PrefixTreeLattice};
use crate::nncore::{log_add_exp, ParamStore, Tensor};
use crate::vocab::{TokenId, Vocab};

/// Source of per-frame output distributions for beam search.
pub trait TransducerScorer {
    type State: Clone;

    /// Number of output symbols, blank included.
    fn num_symbols(&self) -> usize;
    fn num_frames(&self) -> usize;
    fn start(&self) -> Result<Self::State>;
    fn extend(&self, state: &Self::State, token: TokenId) -> Result<Self::State>;
    /// Log-probabilities over all symbols at `frame` given the label history.
    fn log_probs(&self, frame: usize, state: &Self::State) -> Result<Vec<f64>>;
}

/// The trained RNN-T model over a precomputed encoder output.
pub struct ModelScorer<'a> {
    model: &'a RnnTModel,
    store: &'a ParamStore,
    enc_joint: Vec<Tensor>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a RnnTModel, store: &'a ParamStore, encoded: &Tensor) -> Result<Self> {
        let enc_joint = (0..encoded.rows())
            .map(|t| model.joint_enc_frame(store, &Tensor::row_vector(encoded.row(t).to_vec())))
            .collect::<Result<_>>()?;
        Ok(ModelScorer {
            model,
            store,
            enc_joint,
        })
    }
}

impl TransducerScorer for ModelScorer<'_> {
    type State = PredState;

    fn num_symbols(&self) -> usize {
        self.model.cfg.vocab_size
    }

    fn num_frames(&self) -> usize {
        self.enc_joint.len()
    }

    fn start(&self) -> Result<PredState> {
        self.model.pred_start(self.store)
    }

    fn extend(&self, state: &PredState, token: TokenId) -> Result<PredState> {
        self.model.pred_extend(self.store, state, token)
    }

    fn log_probs(&self, frame: usize, state: &PredState) -> Result<Vec<f64>> {
        self.model
            .joint_step(self.store, &self.enc_joint[frame], state)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamOptions {
    pub beam_size: usize,
    pub max_symbols_per_frame: usize,
    /// Subtracted from `log P(</s>)` before pruning.
    pub eos_decode_penalty: f64,
    /// `None` treats every non-blank symbol as an ordinary label.
    pub eos_id: Option<TokenId>,
    /// Label expansions scoring this far below the best blank-terminated
    /// hypothesis of the frame are dropped. `None` keeps the search exact.
    pub prune_margin: Option<f64>,
    /// Stop after this many frames (an external endpointer closed the mic).
    pub max_frames: Option<usize>,
}

impl Default for BeamOptions {
    fn default() -> Self {
        BeamOptions {
            beam_size: 8,
            max_symbols_per_frame: 4,
            eos_decode_penalty: 0.0,
            eos_id: Some(Vocab::EOS_ID),
            prune_margin: None,
            max_frames: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecodeResult {
    /// Surviving hypotheses, best first.
    pub hypotheses: Vec<Hypothesis>,
    pub lattice: PrefixTreeLattice,
    /// Frames consumed when `</s>` topped the beam (1-based frame count).
    pub mic_close_frame: Option<usize>,
    /// Best hypothesis after each frame.
    pub trace: Vec<Vec<TokenId>>,
    pub frames_decoded: usize,
}

impl DecodeResult {
    pub fn best(&self) -> &Hypothesis {
        &self.hypotheses[0]
    }
}

#[derive(Clone)]
struct Hyp<S> {
    tokens: Vec<TokenId>,
    logps: Vec<f64>,
    score: f64,
    state: S,
}

impl<S> Hyp<S> {
    fn ended(&self, eos: Option<TokenId>) -> bool {
        eos.is_some() && self.tokens.last().copied() == eos
    }
}

fn rank<S>(a: &Hyp<S>, b: &Hyp<S>) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Frame-synchronous transducer beam search.
///
/// At each frame every hypothesis may emit up to `max_symbols_per_frame`
/// labels followed by one blank. Hypotheses reaching the same label sequence
/// are merged by summing their probabilities. Once `</s>` ends the best
/// hypothesis after a frame, the microphone closes and search stops.
pub fn streaming_beam_search<S: TransducerScorer>(
    scorer: &S,
    opts: &BeamOptions,
) -> Result<DecodeResult> {
    if opts.beam_size == 0 || opts.max_symbols_per_frame == 0 {
        return Err(Error::config(
            "beam_size and max_symbols_per_frame must be at least 1",
        ));
    }
    let v = scorer.num_symbols();
    let blank = Vocab::BLANK_ID;
    let frames = opts
        .max_frames
        .map_or(scorer.num_frames(), |m| m.min(scorer.num_frames()));
    let mut beam = vec![Hyp {
        tokens: Vec::new(),
        logps: Vec::new(),
        score: 0.0,
        state: scorer.start()?,
    }];
    let mut trace = Vec::with_capacity(frames);
    let mut mic_close_frame = None;
    let mut decoded = 0;

    for t in 0..frames {
        let mut next: BTreeMap<Vec<TokenId>, Hyp<S::State>> = BTreeMap::new();
        let mut best_next = f64::NEG_INFINITY;
        let mut active = std::mem::take(&mut beam);
        for step in 0..=opts.max_symbols_per_frame {
            let mut cands: Vec<(usize, TokenId, f64, f64)> = Vec::new();
            let mut dists = Vec::with_capacity(active.len());
            for h in &active {
                let lp = scorer.log_probs(t, &h.state)?;
                if lp.len() != v {
                    return Err(Error::shape("scorer returned the wrong number of symbols"));
                }
                let s = h.score + lp[blank];
                best_next = best_next.max(s);
                match next.get_mut(&h.tokens) {
                    Some(m) => {
                        if s > m.score {
                            m.logps.clone_from(&h.logps);
                        }
                        m.score = log_add_exp(m.score, s);
                    }
                    None => {
                        next.insert(
                            h.tokens.clone(),
                            Hyp {
                                score: s,
                                ..h.clone()
                            },
                        );
                    }
                }
                dists.push(lp);
            }
            if step == opts.max_symbols_per_frame {
                break;
            }
            for (i, h) in active.iter().enumerate() {
                if h.ended(opts.eos_id) {
                    continue;
                }
                for k in (0..v).filter(|&k| k != blank) {
                    let mut l = dists[i][k];
                    if Some(k) == opts.eos_id {
                        l -= opts.eos_decode_penalty;
                    }
                    let s = h.score + l;
                    if !s.is_finite() || opts.prune_margin.is_some_and(|m| s < best_next - m) {
                        continue;
                    }
                    cands.push((i, k, s, l));
                }
            }
            if cands.is_empty() {
                break;
            }
            cands.sort_by(|a, b| {
                b.2.partial_cmp(&a.2)
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| {
                        let (ha, hb) = (&active[a.0].tokens, &active[b.0].tokens);
                        ha.iter().chain([&a.1]).cmp(hb.iter().chain([&b.1]))
                    })
            });
            cands.truncate(opts.beam_size);
            let mut expanded = Vec::with_capacity(cands.len());
            for (i, k, s, l) in cands {
                let p = &active[i];
                let mut tokens = p.tokens.clone();
                tokens.push(k);
                let mut logps = p.logps.clone();
                logps.push(l);
                expanded.push(Hyp {
                    tokens,
                    logps,
                    score: s,
                    state: scorer.extend(&p.state, k)?,
                });
            }
            active = expanded;
        }
        let mut merged: Vec<Hyp<S::State>> = next.into_values().collect();
        merged.sort_by(rank);
        merged.truncate(opts.beam_size);
        beam = merged;
        decoded = t + 1;
        trace.push(beam[0].tokens.clone());
        if beam[0].ended(opts.eos_id) {
            mic_close_frame = Some(t + 1);
            break;
        }
    }

    let hypotheses: Vec<Hypothesis> = beam
        .into_iter()
        .map(|h| Hypothesis {
            tokens: h.tokens,
            token_logps: h.logps,
            score: h.score,
        })
        .collect();
    let lattice = PrefixTreeLattice::from_beam_hypotheses(&hypotheses)?;
    Ok(DecodeResult {
        hypotheses,
        lattice,
        mic_close_frame,
        trace,
        frames_decoded: decoded,
    })
}
