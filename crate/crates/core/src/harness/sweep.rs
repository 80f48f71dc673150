use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::endpoint::VadConfig;
use super::pipeline::{
    best_tokens, decode_dataset, metrics_csv, records_for, rescore_decoded, summarize,
    DecodeConfig, DecodedUtterance, FirstPass, Metrics, SecondPass,
};
use crate::error::{Error, Result};
use crate::frontend::Dataset;
use crate::lattice::PrefixTreeLattice;
use crate::vocab::TokenId;

/// One operating point of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub eos_decode_penalty: f64,
    /// LAS interpolation weight; ignored without a second pass.
    pub lambda_las: f64,
    pub eos_endpointing: bool,
    /// VAD silence interval; `None` disables the external endpointer.
    pub vad_interval_ms: Option<u32>,
}

impl SweepConfig {
    pub fn id(&self) -> String {
        let vad = self
            .vad_interval_ms
            .map(|v| v.to_string())
            .unwrap_or_else(|| "off".into());
        format!(
            "pen={}|lambda={}|eos={}|vad={}",
            self.eos_decode_penalty,
            self.lambda_las,
            if self.eos_endpointing { "on" } else { "off" },
            vad
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub config: SweepConfig,
    pub metrics: Metrics,
    /// Deletions per 100 reference words.
    pub deletion_rate: f64,
    /// Median mic-close frame over utterances that closed.
    pub median_close_frame: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn csv(&self) -> String {
        let rows: Vec<(String, Metrics)> = self
            .points
            .iter()
            .map(|p| (p.config.id(), p.metrics.clone()))
            .collect();
        metrics_csv(&rows)
    }

    /// WER against EP90 scatter plot.
    pub fn svg(&self) -> String {
        let (w, h, pad) = (480.0, 320.0, 48.0);
        let xs: Vec<f64> = self.points.iter().map(|p| p.metrics.ep90_ms).collect();
        let ys: Vec<f64> = self.points.iter().map(|p| p.metrics.wer).collect();
        let range = |v: &[f64]| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if lo.is_finite() && hi > lo {
                (lo, hi)
            } else {
                (lo.min(0.0), lo.max(0.0) + 1.0)
            }
        };
        let (x0, x1) = range(&xs);
        let (y0, y1) = range(&ys);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-size="11">"#
        );
        let _ = writeln!(
            s,
            r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#,
            h - pad,
            w - pad,
            h - pad,
            h - pad
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">EP90 (ms)</text>"#,
            w / 2.0 - 20.0,
            h - 12.0
        );
        let _ = writeln!(s, r#"<text x="6" y="{}">WER (%)</text>"#, pad - 12.0);
        let _ = writeln!(
            s,
            r#"<text x="{pad}" y="{}">{x0:.0}</text><text x="{}" y="{}">{x1:.0}</text>"#,
            h - pad + 14.0,
            w - pad - 20.0,
            h - pad + 14.0
        );
        let _ = writeln!(
            s,
            r#"<text x="6" y="{}">{y0:.2}</text><text x="6" y="{}">{y1:.2}</text>"#,
            h - pad,
            pad + 4.0
        );
        for (p, (x, y)) in self.points.iter().zip(xs.iter().zip(&ys)) {
            let px = pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
            let py = h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
            let _ = writeln!(
                s,
                r#"<circle cx="{px:.1}" cy="{py:.1}" r="3"><title>{}</title></circle>"#,
                p.config.id()
            );
        }
        s.push_str("</svg>\n");
        s
    }

    /// Lowest-WER point.
    pub fn best_wer(&self) -> Option<&SweepPoint> {
        self.points
            .iter()
            .min_by(|a, b| a.metrics.wer.total_cmp(&b.metrics.wer))
    }
}

fn median_close(decodes: &[DecodedUtterance]) -> Option<usize> {
    let mut c: Vec<usize> = decodes.iter().filter_map(|d| d.mic_close_frame).collect();
    if c.is_empty() {
        return None;
    }
    c.sort_unstable();
    Some(c[c.len().div_ceil(2) - 1])
}

/// Decodes the evaluation set once per distinct first-pass setting, rescores
/// once per decode, and scores every grid point.
pub fn sweep_tradeoff(
    first: FirstPass,
    second: Option<SecondPass>,
    ds: &Dataset,
    base: &DecodeConfig,
    grid: &[SweepConfig],
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::config("sweep grid is empty"));
    }
    let frame_ms = ds.frame_ms() * first.model.cfg.reduction_factor() as u32;
    type Key = (u64, bool, Option<u32>);
    let mut decoded: BTreeMap<Key, (Vec<DecodedUtterance>, Option<Vec<PrefixTreeLattice>>)> =
        BTreeMap::new();
    let mut points = Vec::with_capacity(grid.len());
    for cfg in grid {
        let key = (
            cfg.eos_decode_penalty.to_bits(),
            cfg.eos_endpointing,
            cfg.vad_interval_ms,
        );
        if let std::collections::btree_map::Entry::Vacant(slot) = decoded.entry(key) {
            let dc = DecodeConfig {
                eos_decode_penalty: cfg.eos_decode_penalty,
                eos_endpointing: cfg.eos_endpointing,
                vad: cfg.vad_interval_ms.map(|ms| VadConfig {
                    silence_interval_ms: ms,
                    ..base.vad.clone().unwrap_or_default()
                }),
                ..base.clone()
            };
            slot.insert((decode_dataset(first, ds, &dc)?, None));
        }
        let entry = decoded.get_mut(&key).expect("inserted above");
        let hyps: Option<Vec<Vec<TokenId>>> = match second {
            Some(sp) if cfg.lambda_las > 0.0 => {
                if entry.1.is_none() {
                    let lats = entry
                        .0
                        .iter()
                        .map(|d| rescore_decoded(sp, d, true))
                        .collect::<Result<Vec<_>>>()?;
                    entry.1 = Some(lats);
                }
                let lats = entry.1.as_ref().expect("filled above");
                Some(
                    lats.iter()
                        .map(|l| best_tokens(l, cfg.lambda_las))
                        .collect::<Result<_>>()?,
                )
            }
            _ => None,
        };
        let records = records_for(ds, &entry.0, hyps.as_deref(), frame_ms)?;
        let metrics = summarize(&records)?;
        let ref_words: usize = records.iter().map(|r| r.reference.len()).sum();
        points.push(SweepPoint {
            config: cfg.clone(),
            deletion_rate: metrics.deletion_rate(ref_words),
            median_close_frame: median_close(&entry.0),
            metrics,
        });
    }
    Ok(SweepResult { points })
}
