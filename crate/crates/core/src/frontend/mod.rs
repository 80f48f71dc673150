//! Synthetic multi-domain data, frame stacking and transcript normalization.

mod archive;
mod features;
mod spelling;
mod synth;

pub use archive::{decode_dataset, encode_dataset, load_dataset, save_dataset};
pub use features::{attach_domain_onehot, stack_and_subsample, FeatureSequence};
pub use spelling::{normalize_transcript, SpellingMap};
pub use synth::{
    synth_dataset, Convention, DataConfig, Dataset, DomainConfig, NumberForm, Sample, Synthesizer,
    Utterance, NUMBER_SLOT, WORD_SLOT,
};

use crate::error::Result;
use crate::nncore::Tensor;

/// Stacked, subsampled encoder input, optionally with the domain one-hot.
pub fn model_input(
    features: &FeatureSequence,
    stack: usize,
    subsample: usize,
    onehot_domains: Option<usize>,
) -> Result<Tensor> {
    let stacked = stack_and_subsample(&features.frames, stack, subsample)?;
    match onehot_domains {
        Some(n) => attach_domain_onehot(&stacked, features.domain_id, n),
        None => Ok(stacked),
    }
}
