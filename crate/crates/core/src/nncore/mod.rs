//! Dense algebra, LSTM and attention layers with reverse-mode gradients.

mod gradcheck;
mod graph;
mod layers;
mod ops;
mod params;
mod tensor;

pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var};
pub use layers::{
    lstm_step, multi_head_attention, Linear, LstmLayer, LstmStack, LstmState, MultiHeadAttention,
    FORGET_BIAS_INIT,
};
pub use ops::{Eager, Ops};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{log_add_exp, log_softmax, log_sum_exp, matmul, Tensor};

pub(crate) use layers::lookup;
pub(crate) use ops::kernels;
