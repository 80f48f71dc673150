use serde::{Deserialize, Serialize};

use super::optim::OptimizerConfig;
use super::trainer::{train_loop, TrainOutcome};
use crate::error::{Error, Result};
use crate::harness::edit_distance;
use crate::las::LasModel;
use crate::lattice::PrefixTreeLattice;
use crate::nncore::{Graph, Ops, ParamStore, Tensor, Var};
use crate::vocab::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MwerConfig {
    /// LAS weight in the combined score.
    pub lambda_las: f64,
    pub nbest_size: usize,
    /// Weight of the reference cross-entropy term added to the MWER loss.
    pub ce_weight: f64,
}

impl Default for MwerConfig {
    fn default() -> Self {
        MwerConfig {
            lambda_las: 0.5,
            nbest_size: 4,
            ce_weight: 0.01,
        }
    }
}

/// Expected-error terms over one n-best list.
#[derive(Clone, Debug, PartialEq)]
pub struct MwerTerms {
    /// Softmax of the combined scores.
    pub probs: Vec<f64>,
    pub mean_errors: f64,
    /// `sum_i P(y_i) (W_i - W_mean)`, zero in value.
    pub loss: f64,
    /// `sum_i P(y_i) W_i`; its gradient equals the loss gradient with the
    /// mean treated as a constant.
    pub expected_risk: f64,
    /// Derivative with respect to each combined score: `P_i (W_i - W_mean)`.
    pub score_grads: Vec<f64>,
}

pub fn mwer_terms(scores: &[f64], errors: &[f64]) -> Result<MwerTerms> {
    if scores.len() != errors.len() || scores.is_empty() {
        return Err(Error::shape(
            "scores and errors must be non-empty and aligned",
        ));
    }
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::NonFinite("n-best scores".into()));
    }
    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
    let probs: Vec<f64> = scores.iter().map(|s| (s - m).exp() / z).collect();
    let mean: f64 = probs.iter().zip(errors).map(|(p, w)| p * w).sum();
    let loss = probs.iter().zip(errors).map(|(p, w)| p * (w - mean)).sum();
    let score_grads = probs
        .iter()
        .zip(errors)
        .map(|(p, w)| p * (w - mean))
        .collect();
    Ok(MwerTerms {
        probs,
        mean_errors: mean,
        loss,
        expected_risk: mean,
        score_grads,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NbestEntry {
    pub tokens: Vec<TokenId>,
    pub rnnt_score: f64,
    /// Word errors against the reference.
    pub errors: f64,
}

#[derive(Clone, Debug)]
pub struct MwerExample {
    pub encoded: Tensor,
    pub reference: Vec<TokenId>,
    pub nbest: Vec<NbestEntry>,
}

impl MwerExample {
    /// Top `n` first-pass paths of a `</s>`-free lattice, scored against the
    /// reference after `normalize`.
    pub fn from_lattice(
        encoded: Tensor,
        reference: Vec<TokenId>,
        lattice: &PrefixTreeLattice,
        n: usize,
        normalize: impl Fn(&[TokenId]) -> Vec<TokenId>,
    ) -> Self {
        let nref = normalize(&reference);
        let nbest = lattice
            .nbest(n, &crate::lattice::ScoreWeights::first_pass())
            .into_iter()
            .map(|p| NbestEntry {
                errors: edit_distance(&nref, &normalize(&p.tokens)).distance as f64,
                rnnt_score: p.rnnt_score,
                tokens: p.tokens,
            })
            .collect();
        MwerExample {
            encoded,
            reference,
            nbest,
        }
    }

    pub fn usable(&self) -> bool {
        self.nbest.len() >= 2
    }
}

/// MWER loss of a batch on a graph, plus the reference cross-entropy term.
/// Examples with fewer than two hypotheses are skipped; `None` when all are.
pub fn mwer_loss(
    g: &mut Graph,
    model: &LasModel,
    batch: &[&MwerExample],
    cfg: &MwerConfig,
) -> Result<Option<Var>> {
    let usable: Vec<&MwerExample> = batch.iter().copied().filter(|e| e.usable()).collect();
    if usable.is_empty() {
        return Ok(None);
    }
    let w = 1.0 / usable.len() as f64;
    let lambda = cfg.lambda_las;
    let mut total = 0.0;
    let mut inputs = Vec::new();
    let mut ce_terms = Vec::new();
    for ex in usable {
        let (k, v) = model.source(g, &ex.encoded)?;
        let mut vars = Vec::with_capacity(ex.nbest.len());
        let mut scores = Vec::with_capacity(ex.nbest.len());
        for h in &ex.nbest {
            let l = model.sequence_score(g, &k, &v, &h.tokens, 1.0)?;
            scores.push((1.0 - lambda) * h.rnnt_score + lambda * g.scalar(l));
            vars.push(l);
        }
        let errors: Vec<f64> = ex.nbest.iter().map(|h| h.errors).collect();
        let terms = mwer_terms(&scores, &errors)?;
        total += w * terms.expected_risk;
        for (var, gs) in vars.into_iter().zip(terms.score_grads) {
            inputs.push((var, Tensor::scalar(w * lambda * gs)));
        }
        if cfg.ce_weight > 0.0 {
            ce_terms.push(model.sequence_score(g, &k, &v, &ex.reference, -w * cfg.ce_weight)?);
        }
    }
    let mut loss = g.custom_scalar(total, inputs)?;
    if !ce_terms.is_empty() {
        ce_terms.push(loss);
        let all = g.concat_cols(&ce_terms)?;
        loss = g.sum(all);
    }
    Ok(Some(loss))
}

#[derive(Clone, Debug)]
pub struct MwerOutcome {
    pub train: TrainOutcome,
    /// Examples skipped for having fewer than two hypotheses.
    pub skipped_examples: usize,
}

/// MWER fine-tuning of the second pass; the first pass stays fixed.
pub fn mwer_finetune(
    examples: &[MwerExample],
    model: &LasModel,
    las_params: &mut ParamStore,
    opt: &OptimizerConfig,
    cfg: &MwerConfig,
) -> Result<MwerOutcome> {
    if !(0.0..=1.0).contains(&cfg.lambda_las) || cfg.ce_weight < 0.0 {
        return Err(Error::config(
            "lambda_las must be in [0, 1] and ce_weight non-negative",
        ));
    }
    let skipped_examples = examples.iter().filter(|e| !e.usable()).count();
    let train = train_loop(las_params, opt, examples.len(), |g, idx| {
        let batch: Vec<&MwerExample> = idx.iter().map(|&i| &examples[i]).collect();
        mwer_loss(g, model, &batch, cfg)
    })?;
    Ok(MwerOutcome {
        train,
        skipped_examples,
    })
}
