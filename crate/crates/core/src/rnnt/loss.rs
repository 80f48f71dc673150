use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::lattice::{rnnt_loss, RnnTLogProbLattice};
use super::model::RnnTModel;
use crate::error::{Error, Result};
use crate::nncore::{Graph, Ops, Tensor, Var};
use crate::vocab::{TokenId, Vocab};

/// Training-time penalty on early and late `</s>` emissions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointerPenaltyConfig {
    pub alpha_early: f64,
    pub alpha_late: f64,
    /// Grace period after the reference end, in encoder frames.
    pub t_buffer: usize,
    /// Domains whose targets end with `</s>`. Empty disables endpointing.
    pub enabled_domains: BTreeSet<usize>,
}

impl Default for EndpointerPenaltyConfig {
    fn default() -> Self {
        EndpointerPenaltyConfig {
            alpha_early: 0.0,
            alpha_late: 0.0,
            t_buffer: 0,
            enabled_domains: BTreeSet::new(),
        }
    }
}

impl EndpointerPenaltyConfig {
    pub fn enabled_for(&self, domain: usize) -> bool {
        self.enabled_domains.contains(&domain)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_early >= 0.0 && self.alpha_late >= 0.0) {
            return Err(Error::config(
                "endpointer penalty scales must be non-negative",
            ));
        }
        Ok(())
    }

    /// Penalty subtracted from `log P(</s>)` at frame `t` when speech ends at `t_eos`.
    pub fn penalty(&self, t: usize, t_eos: usize) -> f64 {
        eos_penalty(t, t_eos, self.t_buffer, self.alpha_early, self.alpha_late)
    }
}

/// `max(0, a_early (t_eos - t)) + max(0, a_late (t - t_eos - t_buffer))`.
pub fn eos_penalty(
    t: usize,
    t_eos: usize,
    t_buffer: usize,
    alpha_early: f64,
    alpha_late: f64,
) -> f64 {
    let (t, t_eos, buf) = (t as f64, t_eos as f64, t_buffer as f64);
    let early = (alpha_early * (t_eos - t)).max(0.0);
    let late = (alpha_late * (t - t_eos - buf)).max(0.0);
    early + late
}

/// Subtracts the endpointer penalty from the `</s>` entries of the last
/// label row. Frames are numbered from 1, matching `t_eos`. Rows are not
/// renormalized.
pub fn apply_eos_penalty(
    lattice: &RnnTLogProbLattice,
    labels: &[TokenId],
    t_eos: usize,
    cfg: &EndpointerPenaltyConfig,
) -> Result<RnnTLogProbLattice> {
    if labels.last() != Some(&Vocab::EOS_ID) {
        return Err(Error::contract(
            "endpointer penalty needs labels ending in </s>",
        ));
    }
    if labels.len() != lattice.labels() {
        return Err(Error::shape("labels do not match the lattice"));
    }
    let mut out = lattice.clone();
    let u = labels.len() - 1;
    for c in 0..lattice.frames() {
        let p = cfg.penalty(c + 1, t_eos);
        if p != 0.0 {
            out.set(u, c, Vocab::EOS_ID, lattice.get(u, c, Vocab::EOS_ID) - p);
        }
    }
    Ok(out)
}

/// One utterance prepared for transducer training.
#[derive(Clone, Copy, Debug)]
pub struct TrainExample<'a> {
    /// Encoder input, `T x input_dim`.
    pub input: &'a Tensor,
    /// Reference labels without `</s>`.
    pub labels: &'a [TokenId],
    /// Speech-end frame at the input frame rate, 1-based.
    pub t_eos_frame: usize,
    pub domain_id: usize,
}

/// Mean transducer loss over `batch`, with `</s>` appended and penalized for
/// endpointer-enabled domains.
pub fn rnnt_training_loss(
    g: &mut Graph,
    model: &RnnTModel,
    batch: &[TrainExample],
    ep: &EndpointerPenaltyConfig,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::contract("empty training batch"));
    }
    let targets: Vec<Vec<TokenId>> = batch
        .iter()
        .map(|ex| {
            if ex.labels.contains(&Vocab::EOS_ID) {
                return Err(Error::contract("training labels must not contain </s>"));
            }
            let mut y = ex.labels.to_vec();
            if ep.enabled_for(ex.domain_id) {
                y.push(Vocab::EOS_ID);
            }
            Ok(y)
        })
        .collect::<Result<_>>()?;
    let inputs: Vec<&Tensor> = batch.iter().map(|ex| ex.input).collect();
    let label_refs: Vec<&[TokenId]> = targets.iter().map(Vec::as_slice).collect();
    let enc = model.encode_batch(g, &inputs)?;
    let pred = model.predict_batch(g, &label_refs)?;
    let factor = model.cfg.reduction_factor();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for ((ex, y), (e, p)) in batch.iter().zip(&targets).zip(enc.iter().zip(&pred)) {
        let grid = model.joint_grid(g, e, p)?;
        let frames = g.value(e).rows();
        let mut lat = RnnTLogProbLattice::from_grid(frames, y.len(), g.value(&grid).clone())?;
        if ep.enabled_for(ex.domain_id) {
            lat = apply_eos_penalty(&lat, y, ex.t_eos_frame.div_ceil(factor), ep)?;
        }
        let r = rnnt_loss(&lat, y)?;
        total += r.loss * scale;
        let mut gt = r.grad.into_tensor();
        for v in gt.data_mut() {
            *v *= scale;
        }
        grads.push((grid, gt));
    }
    g.custom_scalar(total, grads)
}
