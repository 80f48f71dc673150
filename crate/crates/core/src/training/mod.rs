//! Optimizers, EMA, training loops for both passes, MWER fine-tuning and
//! checkpoints.

mod checkpoint;
mod ema;
mod mwer;
mod optim;
mod trainer;

pub use checkpoint::{Checkpoint, ModelBundle, StoredTensor, CHECKPOINT_VERSION};
pub use ema::{ema_update, EmaState};
pub use mwer::{
    mwer_finetune, mwer_loss, mwer_terms, MwerConfig, MwerExample, MwerOutcome, MwerTerms,
    NbestEntry,
};
pub use optim::{Method, Optimizer, OptimizerConfig, Schedule};
pub use trainer::{
    las_examples, loss_curve_csv, rnnt_examples, train_las_ce, train_loop, train_rnnt,
    write_loss_curve, LasExample, LossPoint, RnntExample, TrainOutcome,
};
