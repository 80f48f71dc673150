mod binio;
pub mod error;
pub mod frontend;
pub mod harness;
pub mod las;
pub mod lattice;
pub mod nncore;
pub mod quant;
pub mod rnnt;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use vocab::{TokenId, Vocab};
