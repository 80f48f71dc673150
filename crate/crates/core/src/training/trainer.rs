use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ema::{ema_update, EmaState};
use super::optim::{Optimizer, OptimizerConfig};
use crate::error::{Error, Result};
use crate::frontend::{model_input, Dataset};
use crate::las::{las_ce_loss, LasModel};
use crate::nncore::{Graph, ParamStore, Tensor, Var};
use crate::rnnt::{rnnt_training_loss, EndpointerPenaltyConfig, RnnTModel, TrainExample};
use crate::vocab::TokenId;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub curve: Vec<LossPoint>,
    pub ema: Option<EmaState>,
    /// Steps whose batch produced no loss terms.
    pub empty_steps: usize,
}

impl TrainOutcome {
    /// EMA weights when kept, else the trained weights.
    pub fn eval_params<'a>(&'a self, trained: &'a ParamStore) -> &'a ParamStore {
        self.ema.as_ref().map(|e| &e.shadow).unwrap_or(trained)
    }
}

pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut s = String::from("step,loss,lr,grad_norm\n");
    for p in curve {
        let _ = writeln!(s, "{},{},{},{}", p.step, p.loss, p.lr, p.grad_norm);
    }
    s
}

pub fn write_loss_curve(curve: &[LossPoint], path: &Path) -> Result<()> {
    std::fs::write(path, loss_curve_csv(curve))?;
    Ok(())
}

/// Shuffled minibatch indices, reshuffled every epoch.
struct Batcher {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        Batcher {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Generic minibatch loop. `loss_fn` records the loss of a batch of item
/// indices, or `None` when the batch contributes nothing.
pub fn train_loop(
    store: &mut ParamStore,
    opt: &OptimizerConfig,
    num_items: usize,
    mut loss_fn: impl FnMut(&mut Graph, &[usize]) -> Result<Option<Var>>,
) -> Result<TrainOutcome> {
    opt.validate()?;
    if num_items == 0 {
        return Err(Error::contract("training set is empty"));
    }
    let mut batcher = Batcher::new(num_items, opt.seed);
    let mut optimizer = Optimizer::new(opt.method.clone());
    let mut ema = match opt.ema_decay {
        Some(d) => Some(EmaState::new(store, d)?.with_warmup(opt.ema_warmup)),
        None => None,
    };
    let mut curve = Vec::with_capacity(opt.max_steps);
    let mut empty_steps = 0;
    for step in 0..opt.max_steps {
        let idx = batcher.next(opt.batch_size);
        let lr = opt.lr_at(step);
        let (loss, mut grads) = {
            let mut g = Graph::new(store);
            match loss_fn(&mut g, &idx)? {
                Some(v) => (g.scalar(v), g.backward(v)?),
                None => {
                    empty_steps += 1;
                    curve.push(LossPoint {
                        step,
                        loss: 0.0,
                        lr,
                        grad_norm: 0.0,
                    });
                    continue;
                }
            }
        };
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let grad_norm = match opt.clip_norm {
            Some(c) => grads.clip_global_norm(c),
            None => grads.global_norm(),
        };
        optimizer.apply(store, &grads, lr)?;
        if let Some(e) = ema.take() {
            ema = Some(ema_update(e, store)?);
        }
        curve.push(LossPoint {
            step,
            loss,
            lr,
            grad_norm,
        });
    }
    Ok(TrainOutcome {
        curve,
        ema,
        empty_steps,
    })
}

/// Transducer training example with owned encoder input.
#[derive(Clone, Debug)]
pub struct RnntExample {
    pub input: Tensor,
    /// Normalized reference tokens, without `</s>`.
    pub labels: Vec<TokenId>,
    pub t_eos_frame: usize,
    pub domain_id: usize,
}

/// Encoder inputs and spelling-normalized targets for every utterance.
pub fn rnnt_examples(ds: &Dataset, domain_onehot: bool) -> Result<Vec<RnntExample>> {
    let onehot = domain_onehot.then(|| ds.num_domains());
    ds.utterances
        .iter()
        .map(|u| {
            Ok(RnntExample {
                input: model_input(&u.features, ds.stack, ds.subsample, onehot)?,
                labels: ds.spelling.normalize_ids(&u.tokens, &ds.vocab),
                t_eos_frame: u.t_eos_frame,
                domain_id: u.domain_id,
            })
        })
        .collect()
}

pub fn train_rnnt(
    examples: &[RnntExample],
    model: &RnnTModel,
    store: &mut ParamStore,
    opt: &OptimizerConfig,
    ep: &EndpointerPenaltyConfig,
) -> Result<TrainOutcome> {
    ep.validate()?;
    train_loop(store, opt, examples.len(), |g, idx| {
        let batch: Vec<TrainExample> = idx
            .iter()
            .map(|&i| {
                let e = &examples[i];
                TrainExample {
                    input: &e.input,
                    labels: &e.labels,
                    t_eos_frame: e.t_eos_frame,
                    domain_id: e.domain_id,
                }
            })
            .collect();
        rnnt_training_loss(g, model, &batch, ep).map(Some)
    })
}

/// Shared-encoder output paired with a reference, for second-pass training.
#[derive(Clone, Debug)]
pub struct LasExample {
    pub encoded: Tensor,
    pub tokens: Vec<TokenId>,
}

/// Runs the frozen first-pass encoder over every example.
pub fn las_examples(
    examples: &[RnntExample],
    rnnt: &RnnTModel,
    rnnt_params: &ParamStore,
) -> Result<Vec<LasExample>> {
    examples
        .iter()
        .map(|e| {
            Ok(LasExample {
                encoded: rnnt.encode(rnnt_params, &e.input)?,
                tokens: e.labels.clone(),
            })
        })
        .collect()
}

/// Cross-entropy training of the second pass. Only `las_params` is updated;
/// the shared encoder enters as precomputed constants.
pub fn train_las_ce(
    examples: &[LasExample],
    model: &LasModel,
    las_params: &mut ParamStore,
    opt: &OptimizerConfig,
) -> Result<TrainOutcome> {
    train_loop(las_params, opt, examples.len(), |g, idx| {
        let batch: Vec<(&Tensor, &[TokenId])> = idx
            .iter()
            .map(|&i| (&examples[i].encoded, examples[i].tokens.as_slice()))
            .collect();
        las_ce_loss(g, model, &batch).map(Some)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batcher_covers_each_epoch() {
        let mut b = Batcher::new(5, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| b.next(1)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(b.next(9).len(), 5);
    }

    #[test]
    fn csv_header_and_rows() {
        let csv = loss_curve_csv(&[LossPoint {
            step: 0,
            loss: 1.5,
            lr: 0.1,
            grad_norm: 2.0,
        }]);
        assert_eq!(csv, "step,loss,lr,grad_norm\n0,1.5,0.1,2\n");
    }
}
