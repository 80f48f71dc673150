//! First pass: shared encoder, prediction and joint networks, transducer
//! loss with the endpointer penalty, and streaming beam search.

mod lattice;
mod loss;
mod model;
mod search;

pub use lattice::{rnnt_loss, RnnTLogProbLattice, RnnTLoss};
pub use loss::{
    apply_eos_penalty, eos_penalty, rnnt_training_loss, EndpointerPenaltyConfig, TrainExample,
};
pub use model::{
    encode_stream, EncoderStream, PredState, RnnTConfig, RnnTModel, TimeReduction, BLANK_BIAS_INIT,
};
pub use search::{streaming_beam_search, BeamOptions, DecodeResult, ModelScorer, TransducerScorer};
