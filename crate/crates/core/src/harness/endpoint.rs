use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::FeatureSequence;

/// Fixed-interval energy endpointer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VadConfig {
    /// Mean squared feature value at or above which a raw frame is speech.
    pub energy_threshold: f64,
    pub silence_interval_ms: u32,
}

impl Default for VadConfig {
    fn default() -> Self {
        VadConfig {
            energy_threshold: 0.4,
            silence_interval_ms: 500,
        }
    }
}

/// Mean squared value of each raw frame.
pub fn frame_energies(features: &FeatureSequence) -> Vec<f64> {
    let f = &features.frames;
    (0..f.rows())
        .map(|t| {
            let row = f.row(t);
            row.iter().map(|v| v * v).sum::<f64>() / row.len().max(1) as f64
        })
        .collect()
}

/// Time of the end-of-query decision, in milliseconds from the start. The
/// microphone closes once speech has been seen and the following raw frames
/// have stayed below the threshold for `silence_interval_ms`. `None` when
/// that never happens.
pub fn vad_endpoint(
    features: &FeatureSequence,
    energy_threshold: f64,
    silence_interval_ms: u32,
) -> Result<Option<u32>> {
    if silence_interval_ms == 0 {
        return Err(Error::config("silence interval must be positive"));
    }
    let hop = features.hop_ms;
    if hop == 0 {
        return Err(Error::config("feature hop must be positive"));
    }
    let needed = silence_interval_ms.div_ceil(hop) as usize;
    let mut seen_speech = false;
    let mut silent = 0usize;
    for (t, e) in frame_energies(features).into_iter().enumerate() {
        if e >= energy_threshold {
            seen_speech = true;
            silent = 0;
        } else if seen_speech {
            silent += 1;
            if silent >= needed {
                return Ok(Some((t as u32 + 1) * hop));
            }
        }
    }
    Ok(None)
}

/// Decoding frame (1-based count of frames consumed) at which a close at
/// `close_ms` takes effect.
pub fn close_ms_to_frame(close_ms: u32, frame_ms: u32) -> usize {
    close_ms.div_ceil(frame_ms).max(1) as usize
}

/// `close_frame * frame_ms - speech_end_ms`; negative for early cutoffs.
pub fn ep_latency(mic_close_frame: usize, speech_end_ms: u32, frame_duration_ms: u32) -> f64 {
    mic_close_frame as f64 * f64::from(frame_duration_ms) - f64::from(speech_end_ms)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::nncore::Tensor;

    fn seq(energies: &[f64]) -> FeatureSequence {
        let data: Vec<f64> = energies.iter().flat_map(|e| [e.sqrt(), e.sqrt()]).collect();
        FeatureSequence {
            frames: Tensor::matrix(energies.len(), 2, data).unwrap(),
            speech_end_ms: 0,
            domain_id: 0,
            hop_ms: 10,
        }
    }

    #[test]
    fn all_silence_never_closes() {
        assert_eq!(vad_endpoint(&seq(&[0.0; 200]), 0.5, 400).unwrap(), None);
    }

    #[test]
    fn closes_after_interval() {
        let mut e = vec![0.0; 10];
        e.extend(vec![1.0; 50]);
        e.extend(vec![0.0; 100]);
        // Speech occupies frames 10..60, ending at 600 ms.
        assert_eq!(vad_endpoint(&seq(&e), 0.5, 400).unwrap(), Some(1000));
        assert!(vad_endpoint(&seq(&e), 0.5, 0).is_err());
    }

    /// Direct scan over the energy track of a noisy utterance.
    #[test]
    fn noisy_utterance_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut energies = Vec::new();
        for t in 0..150 {
            let base = if (5..70).contains(&t) { 1.0 } else { 0.0 };
            let v: f64 = base + noise.sample(&mut rng);
            energies.push(v * v);
        }
        let f = seq(&energies);
        let got = vad_endpoint(&f, 0.4, 300).unwrap();
        let track = frame_energies(&f);
        let mut want = None;
        for t in 0..track.len() {
            let speech_before = track[..t].iter().any(|&e| e >= 0.4);
            if t + 1 >= 30 && speech_before && track[t + 1 - 30..=t].iter().all(|&e| e < 0.4) {
                want = Some((t as u32 + 1) * 10);
                break;
            }
        }
        assert_eq!(got, want);
        assert!(got.is_some());
    }

    #[test]
    fn latency_arithmetic() {
        assert_eq!(ep_latency(22, 600, 30), 60.0);
        assert_eq!(ep_latency(20, 600, 30), 0.0);
        assert_eq!(ep_latency(18, 600, 30), -60.0);
        assert_eq!(close_ms_to_frame(1000, 30), 34);
        assert_eq!(close_ms_to_frame(990, 30), 33);
    }
}
