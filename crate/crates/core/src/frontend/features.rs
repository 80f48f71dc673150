use crate::error::{Error, Result};
use crate::nncore::Tensor;

/// Raw-rate acoustic frames of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    /// `T0 x d0`, one row per hop.
    pub frames: Tensor,
    pub speech_end_ms: u32,
    pub domain_id: usize,
    pub hop_ms: u32,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn duration_ms(&self) -> u32 {
        self.num_frames() as u32 * self.hop_ms
    }
}

/// Stacks `stack` frames of left context onto every `subsample`-th frame.
///
/// Output row `i` concatenates input frames `j - stack + 1 ..= j` for
/// `j = i * subsample`; indices before the start repeat frame 0.
pub fn stack_and_subsample(frames: &Tensor, stack: usize, subsample: usize) -> Result<Tensor> {
    let t0 = frames.rows();
    if frames.numel() == 0 || t0 == 0 {
        return Err(Error::shape("cannot stack an empty feature sequence"));
    }
    if stack == 0 || subsample == 0 {
        return Err(Error::config(
            "stack and subsample factors must be positive",
        ));
    }
    let d = frames.cols();
    let t = t0.div_ceil(subsample);
    let mut out = Vec::with_capacity(t * stack * d);
    for i in 0..t {
        let j = i * subsample;
        for back in (0..stack).rev() {
            let src = j.saturating_sub(back);
            out.extend_from_slice(frames.row(src));
        }
    }
    Tensor::matrix(t, stack * d, out)
}

/// Appends a one-hot domain indicator to every frame.
pub fn attach_domain_onehot(
    stacked: &Tensor,
    domain_id: usize,
    num_domains: usize,
) -> Result<Tensor> {
    if domain_id >= num_domains {
        return Err(Error::config(format!(
            "domain id {domain_id} out of range for {num_domains} domains"
        )));
    }
    let (t, d) = (stacked.rows(), stacked.cols());
    let mut out = Vec::with_capacity(t * (d + num_domains));
    for r in 0..t {
        out.extend_from_slice(stacked.row(r));
        out.extend((0..num_domains).map(|k| if k == domain_id { 1.0 } else { 0.0 }));
    }
    Tensor::matrix(t, d + num_domains, out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn single_frame_is_repeated() {
        let f = Tensor::row_vector(vec![1.0, 2.0]);
        let out = stack_and_subsample(&f, 4, 3).unwrap();
        assert_eq!(out.shape(), &[1, 8]);
        assert_eq!(out.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn unit_factors_are_identity() {
        let f = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(stack_and_subsample(&f, 1, 1).unwrap(), f);
    }

    #[test]
    fn indexing_rule_enumerated() {
        let rows: Vec<Vec<f64>> = (0..7).map(|t| vec![t as f64, t as f64 + 0.5]).collect();
        let f = Tensor::from_rows(&rows).unwrap();
        let out = stack_and_subsample(&f, 2, 3).unwrap();
        assert_eq!(out.shape(), &[3, 4]);
        // j = 0, 3, 6 with one frame of left context, frame 0 repeated before the start.
        assert_eq!(out.row(0), &[0.0, 0.5, 0.0, 0.5]);
        assert_eq!(out.row(1), &[2.0, 2.5, 3.0, 3.5]);
        assert_eq!(out.row(2), &[5.0, 5.5, 6.0, 6.5]);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(stack_and_subsample(&Tensor::zeros(vec![0, 3]), 4, 3).is_err());
    }

    #[test]
    fn onehot_suffix() {
        let s = Tensor::zeros(vec![2, 3]);
        let out = attach_domain_onehot(&s, 0, 4).unwrap();
        assert_eq!(&out.row(1)[3..], &[1.0, 0.0, 0.0, 0.0]);
        let out = attach_domain_onehot(&s, 0, 1).unwrap();
        assert_eq!(&out.row(0)[3..], &[1.0]);
    }

    #[test]
    fn onehot_direct_construction() {
        let s = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let out = attach_domain_onehot(&s, 2, 4).unwrap();
        assert_eq!(out.shape(), &[3, 6]);
        for r in 0..3 {
            assert_eq!(&out.row(r)[..2], s.row(r));
            assert_eq!(&out.row(r)[2..], &[0.0, 0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn onehot_out_of_range() {
        assert!(attach_domain_onehot(&Tensor::zeros(vec![1, 1]), 4, 4).is_err());
    }

    proptest! {
        #[test]
        fn output_length_is_ceil(t0 in 1usize..=1000, stack in 1usize..6, sub in 1usize..6) {
            let f = Tensor::zeros(vec![t0, 2]);
            let out = stack_and_subsample(&f, stack, sub).unwrap();
            prop_assert_eq!(out.rows(), t0.div_ceil(sub));
            prop_assert_eq!(out.cols(), 2 * stack);
        }
    }
}
