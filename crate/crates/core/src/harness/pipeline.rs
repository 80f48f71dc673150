use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::endpoint::{close_ms_to_frame, ep_latency, vad_endpoint, VadConfig};
use super::metrics::{edit_distance, percentile, wer, EditStats};
use crate::error::{Error, Result};
use crate::frontend::{model_input, Dataset, Utterance};
use crate::las::{build_attention_cache, rescore_lattice, LasModel};
use crate::lattice::{PrefixTreeLattice, ScoreWeights};
use crate::nncore::{ParamStore, Tensor};
use crate::rnnt::{streaming_beam_search, BeamOptions, ModelScorer, RnnTModel};
use crate::vocab::{TokenId, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_symbols_per_frame: usize,
    pub eos_decode_penalty: f64,
    pub prune_margin: Option<f64>,
    /// Close the microphone when `</s>` tops the beam.
    pub eos_endpointing: bool,
    /// External energy endpointer; `None` disables it.
    pub vad: Option<VadConfig>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 8,
            max_symbols_per_frame: 4,
            eos_decode_penalty: 0.0,
            prune_margin: Some(10.0),
            eos_endpointing: true,
            vad: None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_symbols_per_frame == 0 {
            return Err(Error::config(
                "beam_size and max_symbols_per_frame must be positive",
            ));
        }
        if self.eos_decode_penalty.is_nan() || self.eos_decode_penalty < 0.0 {
            return Err(Error::config("eos_decode_penalty must be non-negative"));
        }
        if let Some(v) = &self.vad {
            if v.silence_interval_ms == 0 {
                return Err(Error::config("VAD silence interval must be positive"));
            }
        }
        Ok(())
    }

    pub fn beam_options(&self) -> BeamOptions {
        BeamOptions {
            beam_size: self.beam_size,
            max_symbols_per_frame: self.max_symbols_per_frame,
            eos_decode_penalty: if self.eos_endpointing {
                self.eos_decode_penalty
            } else {
                f64::INFINITY
            },
            eos_id: Some(Vocab::EOS_ID),
            prune_margin: self.prune_margin,
            max_frames: None,
        }
    }
}

/// The first-pass model with the input convention it was trained on.
#[derive(Clone, Copy)]
pub struct FirstPass<'a> {
    pub model: &'a RnnTModel,
    pub params: &'a ParamStore,
    /// Number of domains whose one-hot is appended to the encoder input.
    pub onehot_domains: Option<usize>,
}

#[derive(Clone, Copy)]
pub struct SecondPass<'a> {
    pub model: &'a LasModel,
    pub params: &'a ParamStore,
}

#[derive(Clone, Debug)]
pub struct DecodedUtterance {
    pub id: u64,
    pub domain_id: usize,
    /// Best first-pass hypothesis without `</s>`.
    pub hypothesis: Vec<TokenId>,
    /// First-pass lattice with `</s>` folded into the final weights.
    pub lattice: PrefixTreeLattice,
    pub eos_close_frame: Option<usize>,
    pub vad_close_frame: Option<usize>,
    /// Earlier of the two closes.
    pub mic_close_frame: Option<usize>,
    pub frames_decoded: usize,
    /// Shared-encoder output over the decoded frames.
    pub encoded: Tensor,
}

pub fn decode_utterance(
    first: FirstPass,
    utt: &Utterance,
    stack: usize,
    subsample: usize,
    cfg: &DecodeConfig,
) -> Result<DecodedUtterance> {
    let input = model_input(&utt.features, stack, subsample, first.onehot_domains)?;
    let encoded = first.model.encode(first.params, &input)?;
    let frame_ms = utt.features.hop_ms * (subsample * first.model.cfg.reduction_factor()) as u32;
    let vad_close_frame = match &cfg.vad {
        Some(v) => vad_endpoint(&utt.features, v.energy_threshold, v.silence_interval_ms)?
            .map(|ms| close_ms_to_frame(ms, frame_ms).min(encoded.rows())),
        None => None,
    };
    let mut opts = cfg.beam_options();
    opts.max_frames = vad_close_frame;
    let scorer = ModelScorer::new(first.model, first.params, &encoded)?;
    let result = streaming_beam_search(&scorer, &opts)?;
    let eos_close_frame = result.mic_close_frame;
    let mic_close_frame = match (eos_close_frame, vad_close_frame) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    let hypothesis = result
        .best()
        .tokens
        .iter()
        .copied()
        .filter(|&t| t != Vocab::EOS_ID)
        .collect();
    let lattice = result.lattice.strip_token(Vocab::EOS_ID)?;
    let frames = result.frames_decoded.max(1).min(encoded.rows());
    let encoded = Tensor::from_rows(
        &(0..frames)
            .map(|t| encoded.row(t).to_vec())
            .collect::<Vec<_>>(),
    )?;
    Ok(DecodedUtterance {
        id: utt.id,
        domain_id: utt.domain_id,
        hypothesis,
        lattice,
        eos_close_frame,
        vad_close_frame,
        mic_close_frame,
        frames_decoded: result.frames_decoded,
        encoded,
    })
}

pub fn decode_dataset(
    first: FirstPass,
    ds: &Dataset,
    cfg: &DecodeConfig,
) -> Result<Vec<DecodedUtterance>> {
    cfg.validate()?;
    ds.utterances
        .iter()
        .map(|u| decode_utterance(first, u, ds.stack, ds.subsample, cfg))
        .collect()
}

/// First-pass lattice with second-pass scores filled in.
pub fn rescore_decoded(
    second: SecondPass,
    d: &DecodedUtterance,
    batched: bool,
) -> Result<PrefixTreeLattice> {
    let cache = build_attention_cache(second.model, second.params, &d.encoded)?;
    let mut lat = d.lattice.clone();
    rescore_lattice(second.model, second.params, &mut lat, &cache, batched)?;
    Ok(lat)
}

/// Best tokens of a rescored lattice under `lambda_las`.
pub fn best_tokens(lattice: &PrefixTreeLattice, lambda_las: f64) -> Result<Vec<TokenId>> {
    Ok(lattice.best_path(&ScoreWeights::new(lambda_las)?)?.tokens)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub id: u64,
    pub domain_id: usize,
    /// Spelling-normalized reference.
    pub reference: Vec<TokenId>,
    /// Spelling-normalized hypothesis.
    pub hypothesis: Vec<TokenId>,
    pub mic_close_frame: Option<usize>,
    pub speech_end_ms: u32,
    pub utterance_end_ms: u32,
    pub ep_latency_ms: Option<f64>,
    pub errors: EditStats,
}

impl EvalRecord {
    pub fn new(
        utt: &Utterance,
        hypothesis: &[TokenId],
        mic_close_frame: Option<usize>,
        frame_ms: u32,
        ds: &Dataset,
    ) -> Self {
        let reference = ds.spelling.normalize_ids(&utt.tokens, &ds.vocab);
        let hypothesis = ds.spelling.normalize_ids(hypothesis, &ds.vocab);
        let errors = edit_distance(&reference, &hypothesis);
        let speech_end_ms = utt.features.speech_end_ms;
        EvalRecord {
            id: utt.id,
            domain_id: utt.domain_id,
            ep_latency_ms: mic_close_frame.map(|f| ep_latency(f, speech_end_ms, frame_ms)),
            reference,
            hypothesis,
            mic_close_frame,
            speech_end_ms,
            utterance_end_ms: utt.features.duration_ms(),
            errors,
        }
    }

    pub fn early_cutoff(&self) -> bool {
        self.ep_latency_ms.is_some_and(|l| l < 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub wer: f64,
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
    pub ep50_ms: f64,
    pub ep90_ms: f64,
    pub n_utts: usize,
    pub n_no_close: usize,
    pub n_early_cutoff: usize,
}

impl Metrics {
    pub fn deletion_rate(&self, ref_words: usize) -> f64 {
        100.0 * self.del as f64 / ref_words.max(1) as f64
    }
}

/// WER and endpoint latency percentiles. Utterances that never closed are
/// charged the time from speech end to utterance end.
pub fn summarize(records: &[EvalRecord]) -> Result<Metrics> {
    if records.is_empty() {
        return Err(Error::contract("no records to summarize"));
    }
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.id);
    let pairs: Vec<(&[TokenId], &[TokenId])> = sorted
        .iter()
        .map(|r| (r.reference.as_slice(), r.hypothesis.as_slice()))
        .collect();
    let w = wer(&pairs)?;
    let latencies: Vec<f64> = sorted
        .iter()
        .map(|r| {
            r.ep_latency_ms
                .unwrap_or(f64::from(r.utterance_end_ms) - f64::from(r.speech_end_ms))
        })
        .collect();
    Ok(Metrics {
        wer: w.wer,
        sub: w.errors.sub,
        ins: w.errors.ins,
        del: w.errors.del,
        ep50_ms: percentile(&latencies, 50.0)?,
        ep90_ms: percentile(&latencies, 90.0)?,
        n_utts: records.len(),
        n_no_close: records
            .iter()
            .filter(|r| r.mic_close_frame.is_none())
            .count(),
        n_early_cutoff: records.iter().filter(|r| r.early_cutoff()).count(),
    })
}

pub const METRICS_HEADER: &str = "config_id,wer,sub,ins,del,ep50_ms,ep90_ms,n_utts,n_no_close";

pub fn metrics_csv_row(config_id: &str, m: &Metrics) -> String {
    format!(
        "{},{:.4},{},{},{},{},{},{},{}",
        config_id, m.wer, m.sub, m.ins, m.del, m.ep50_ms, m.ep90_ms, m.n_utts, m.n_no_close
    )
}

pub fn metrics_csv(rows: &[(String, Metrics)]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for (id, m) in rows {
        let _ = writeln!(s, "{}", metrics_csv_row(id, m));
    }
    s
}

/// Records for decoded utterances, in dataset order. `hyps` overrides the
/// first-pass hypothesis when given.
pub fn records_for(
    ds: &Dataset,
    decodes: &[DecodedUtterance],
    hyps: Option<&[Vec<TokenId>]>,
    frame_ms: u32,
) -> Result<Vec<EvalRecord>> {
    if decodes.len() != ds.len() || hyps.is_some_and(|h| h.len() != ds.len()) {
        return Err(Error::contract("decodes do not match the dataset"));
    }
    Ok(ds
        .utterances
        .iter()
        .zip(decodes)
        .enumerate()
        .map(|(i, (u, d))| {
            let hyp = hyps.map(|h| h[i].as_slice()).unwrap_or(&d.hypothesis);
            EvalRecord::new(u, hyp, d.mic_close_frame, frame_ms, ds)
        })
        .collect())
}
