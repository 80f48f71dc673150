use std::fs;
use std::path::Path;

use super::features::FeatureSequence;
use super::spelling::SpellingMap;
use super::synth::{Dataset, Utterance};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::nncore::Tensor;
use crate::vocab::Vocab;

const MAGIC: &[u8; 4] = b"TPDS";
const VERSION: u32 = 1;

/// Serializes a dataset. Features are stored as little-endian `f32`.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(ds.hop_ms);
    w.len_u32(ds.stack)?;
    w.len_u32(ds.subsample)?;
    w.len_u32(ds.domain_names.len())?;
    for name in &ds.domain_names {
        w.str(name)?;
    }
    w.len_u32(ds.vocab.len())?;
    for t in ds.vocab.tokens() {
        w.str(t)?;
    }
    let pairs: Vec<(&str, &str)> = ds.spelling.pairs().collect();
    w.len_u32(pairs.len())?;
    for (a, b) in pairs {
        w.str(a)?;
        w.str(b)?;
    }
    w.u64(ds.utterances.len() as u64);
    for u in &ds.utterances {
        w.u64(u.id);
        w.len_u32(u.domain_id)?;
        w.u32(u.features.speech_end_ms);
        w.len_u32(u.t_eos_frame)?;
        w.len_u32(u.tokens.len())?;
        for &t in &u.tokens {
            w.len_u32(t)?;
        }
        let f = &u.features.frames;
        w.len_u32(f.rows())?;
        w.len_u32(f.cols())?;
        for &v in f.data() {
            w.f32(v as f32);
        }
    }
    Ok(w.buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::format("not a dataset archive"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let hop_ms = r.u32()?;
    let stack = r.u32()? as usize;
    let subsample = r.u32()? as usize;
    let nd = r.len(4)?;
    let domain_names = (0..nd).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let nv = r.len(4)?;
    let tokens = (0..nv).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let vocab = Vocab::from_tokens(tokens)?;
    let ns = r.len(8)?;
    let mut pairs = Vec::with_capacity(ns);
    for _ in 0..ns {
        pairs.push((r.str()?, r.str()?));
    }
    let spelling = SpellingMap::new(pairs)?;
    let n = r.u64()?;
    let mut utterances = Vec::new();
    for _ in 0..n {
        let id = r.u64()?;
        let domain_id = r.u32()? as usize;
        let speech_end_ms = r.u32()?;
        let t_eos_frame = r.u32()? as usize;
        let nt = r.len(4)?;
        let toks = (0..nt)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let count = rows
            .checked_mul(cols)
            .filter(|c| c.saturating_mul(4) <= bytes.len())
            .ok_or_else(|| Error::format("feature block too large"))?;
        let data = (0..count)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        if domain_id >= nd || toks.iter().any(|&t| t >= vocab.len()) {
            return Err(Error::format(format!("record {id} references unknown ids")));
        }
        utterances.push(Utterance {
            id,
            features: FeatureSequence {
                frames: Tensor::matrix(rows, cols, data)?,
                speech_end_ms,
                domain_id,
                hop_ms,
            },
            tokens: toks,
            t_eos_frame,
            domain_id,
        });
    }
    if !r.is_done() {
        return Err(Error::format("trailing bytes after dataset records"));
    }
    Ok(Dataset {
        vocab,
        spelling,
        domain_names,
        hop_ms,
        stack,
        subsample,
        utterances,
    })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{synth_dataset, DataConfig};

    #[test]
    fn archive_round_trip_is_exact() {
        let ds = synth_dataset(&DataConfig::default(), 7, 12).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_archives_rejected() {
        let ds = synth_dataset(&DataConfig::default(), 7, 2).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        assert!(decode_dataset(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_dataset(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(
            decode_dataset(&bad),
            Err(Error::Version { found: 9, .. })
        ));
    }
}
