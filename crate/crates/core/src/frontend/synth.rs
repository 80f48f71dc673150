use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::features::FeatureSequence;
use super::spelling::SpellingMap;
use crate::error::{Error, Result};
use crate::nncore::Tensor;
use crate::vocab::{TokenId, Vocab};

/// Grammar symbol expanding to a random word.
pub const WORD_SLOT: &str = "W";
/// Grammar symbol expanding to a random number.
pub const NUMBER_SLOT: &str = "N";

const DEFAULT_CONFIG: &str = include_str!("default_data.toml");

/// How a domain writes numbers in its transcripts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    Written,
    Spoken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumberForm {
    pub spoken: Vec<String>,
    pub written: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub name: String,
    pub weight: f64,
    pub convention: Convention,
    /// Each pattern is a list of `W`, `N` or literal words.
    pub patterns: Vec<Vec<String>>,
    /// Trailing silence in raw frames, inclusive range.
    pub silence: [usize; 2],
    #[serde(default)]
    pub variant_prob: f64,
}

/// Grammar and acoustics of the synthetic task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub feature_dim: usize,
    pub frames_per_token: usize,
    pub hop_ms: u32,
    pub stack: usize,
    pub subsample: usize,
    pub noise_sigma: f64,
    pub template_seed: u64,
    /// Leading silence in raw frames, inclusive range.
    pub lead_silence: [usize; 2],
    pub words: Vec<String>,
    #[serde(default)]
    pub numbers: Vec<NumberForm>,
    /// Variant spelling to canonical word.
    #[serde(default)]
    pub spelling: BTreeMap<String, String>,
    pub domains: Vec<DomainConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::from_toml(DEFAULT_CONFIG).expect("bundled data config parses")
    }
}

impl DataConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: DataConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("data config serializes")
    }

    /// Frame duration after subsampling.
    pub fn frame_ms(&self) -> u32 {
        self.hop_ms * self.subsample as u32
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.feature_dim == 0 || self.frames_per_token == 0 || self.hop_ms == 0 {
            return bad("feature_dim, frames_per_token and hop_ms must be positive".into());
        }
        if self.stack == 0 || self.subsample == 0 {
            return bad("stack and subsample must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise_sigma {} must be finite and non-negative",
                self.noise_sigma
            ));
        }
        if self.lead_silence[0] > self.lead_silence[1] {
            return bad("lead_silence range is reversed".into());
        }
        if self.words.is_empty() {
            return bad("word list is empty".into());
        }
        let words: BTreeSet<&str> = self.words.iter().map(String::as_str).collect();
        for w in &self.words {
            if w == WORD_SLOT || w == NUMBER_SLOT {
                return bad(format!("{w} is reserved as a grammar symbol"));
            }
        }
        for (variant, canonical) in &self.spelling {
            if !words.contains(canonical.as_str()) {
                return bad(format!("spelling target {canonical} is not a word"));
            }
            if words.contains(variant.as_str()) {
                return bad(format!("spelling variant {variant} is also a word"));
            }
        }
        SpellingMap::new(self.spelling.clone())?;
        for n in &self.numbers {
            if n.spoken.is_empty() || n.written.is_empty() {
                return bad("number forms need spoken and written tokens".into());
            }
        }
        if self.domains.is_empty() {
            return bad("at least one domain is required".into());
        }
        let mut total = 0.0;
        for d in &self.domains {
            if !(d.weight > 0.0 && d.weight.is_finite()) {
                return bad(format!("domain {} has non-positive weight", d.name));
            }
            total += d.weight;
            if d.patterns.is_empty() {
                return bad(format!("domain {} has no patterns", d.name));
            }
            if d.silence[0] == 0 || d.silence[0] > d.silence[1] {
                return bad(format!(
                    "domain {} silence range must be positive and ordered",
                    d.name
                ));
            }
            if !(0.0..=1.0).contains(&d.variant_prob) {
                return bad(format!("domain {} variant_prob outside [0, 1]", d.name));
            }
            for p in &d.patterns {
                if p.is_empty() {
                    return bad(format!("domain {} has an empty pattern", d.name));
                }
                for sym in p {
                    match sym.as_str() {
                        WORD_SLOT => {}
                        NUMBER_SLOT if !self.numbers.is_empty() => {}
                        NUMBER_SLOT => {
                            return bad("pattern uses N but no numbers are defined".into())
                        }
                        lit if words.contains(lit) => {}
                        lit => return bad(format!("pattern literal {lit} is not a word")),
                    }
                }
            }
        }
        if !total.is_finite() {
            return bad("domain weights overflow".into());
        }
        Ok(())
    }

    /// Output inventory: words, spelling variants, spoken and written number tokens.
    pub fn vocab(&self) -> Result<Vocab> {
        let pieces = self
            .words
            .iter()
            .chain(self.spelling.keys())
            .chain(self.numbers.iter().flat_map(|n| n.spoken.iter()))
            .chain(self.numbers.iter().flat_map(|n| n.written.iter()))
            .cloned();
        Vocab::new(pieces)
    }

    pub fn spelling_map(&self) -> Result<SpellingMap> {
        SpellingMap::new(self.spelling.clone())
    }

    /// Acoustic units: every word and every spoken number token.
    fn units(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self
            .words
            .iter()
            .chain(self.numbers.iter().flat_map(|n| n.spoken.iter()))
            .collect();
        set.into_iter().cloned().collect()
    }
}

/// One labelled training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: u64,
    pub features: FeatureSequence,
    pub tokens: Vec<TokenId>,
    /// 1-based subsampled frame that first contains the last speech frame.
    pub t_eos_frame: usize,
    pub domain_id: usize,
}

impl Utterance {
    pub fn domain_id(&self) -> usize {
        self.domain_id
    }
}

/// A generated utterance together with the acoustic units it was built from.
#[derive(Clone, Debug)]
pub struct Sample {
    pub utterance: Utterance,
    pub spoken: Vec<String>,
    pub lead_frames: usize,
}

/// Generator for a fixed grammar; owns the per-unit acoustic templates.
#[derive(Clone, Debug)]
pub struct Synthesizer {
    cfg: DataConfig,
    vocab: Vocab,
    templates: BTreeMap<String, Tensor>,
    variants: BTreeMap<String, Vec<String>>,
    cumulative: Vec<f64>,
}

impl Synthesizer {
    pub fn new(cfg: DataConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = cfg.vocab()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.template_seed);
        let mut templates = BTreeMap::new();
        for unit in cfg.units() {
            let mut data = Vec::with_capacity(cfg.frames_per_token * cfg.feature_dim);
            for _ in 0..cfg.frames_per_token {
                let row: Vec<f64> = (0..cfg.feature_dim)
                    .map(|_| rng.sample(StandardNormal))
                    .collect();
                let rms = (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64)
                    .sqrt()
                    .max(1e-12);
                data.extend(row.iter().map(|v| round_f32(v / rms)));
            }
            templates.insert(
                unit,
                Tensor::matrix(cfg.frames_per_token, cfg.feature_dim, data)?,
            );
        }
        let mut variants: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (v, c) in &cfg.spelling {
            variants.entry(c.clone()).or_default().push(v.clone());
        }
        let total: f64 = cfg.domains.iter().map(|d| d.weight).sum();
        let mut acc = 0.0;
        let cumulative = cfg
            .domains
            .iter()
            .map(|d| {
                acc += d.weight / total;
                acc
            })
            .collect();
        Ok(Synthesizer {
            cfg,
            vocab,
            templates,
            variants,
            cumulative,
        })
    }

    pub fn config(&self) -> &DataConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn template(&self, unit: &str) -> Option<&Tensor> {
        self.templates.get(unit)
    }

    fn pick_domain(&self, rng: &mut ChaCha8Rng) -> usize {
        let x: f64 = rng.random();
        self.cumulative
            .iter()
            .position(|&c| x < c)
            .unwrap_or(self.cumulative.len() - 1)
    }

    /// Generates utterance `index` of the dataset identified by `seed`.
    pub fn sample(&self, seed: u64, index: u64) -> Result<Sample> {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);

        let domain_id = self.pick_domain(&mut rng);
        let domain = &cfg.domains[domain_id];
        let pattern = &domain.patterns[rng.random_range(0..domain.patterns.len())];
        let mut spoken = Vec::new();
        let mut written = Vec::new();
        for sym in pattern {
            match sym.as_str() {
                NUMBER_SLOT => {
                    let n = &cfg.numbers[rng.random_range(0..cfg.numbers.len())];
                    spoken.extend(n.spoken.iter().cloned());
                    match domain.convention {
                        Convention::Written => written.extend(n.written.iter().cloned()),
                        Convention::Spoken => written.extend(n.spoken.iter().cloned()),
                    }
                }
                slot => {
                    let word = if slot == WORD_SLOT {
                        cfg.words[rng.random_range(0..cfg.words.len())].clone()
                    } else {
                        slot.to_string()
                    };
                    let mut text = word.clone();
                    if let Some(vs) = self.variants.get(&word) {
                        if domain.variant_prob > 0.0 && rng.random::<f64>() < domain.variant_prob {
                            text = vs[rng.random_range(0..vs.len())].clone();
                        }
                    }
                    spoken.push(word);
                    written.push(text);
                }
            }
        }
        let tokens = self.vocab.encode(&written)?;

        let lead = rng.random_range(cfg.lead_silence[0]..=cfg.lead_silence[1]);
        let trail = rng.random_range(domain.silence[0]..=domain.silence[1]);
        let speech = spoken.len() * cfg.frames_per_token;
        let t0 = lead + speech + trail;
        let d = cfg.feature_dim;
        let mut data = vec![0.0; t0 * d];
        for (k, unit) in spoken.iter().enumerate() {
            let tpl = &self.templates[unit];
            let start = (lead + k * cfg.frames_per_token) * d;
            data[start..start + tpl.numel()].copy_from_slice(tpl.data());
        }
        if cfg.noise_sigma > 0.0 {
            for v in data.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += cfg.noise_sigma * z;
            }
        }
        for v in data.iter_mut() {
            *v = round_f32(*v);
        }

        let n_end = lead + speech;
        let t = t0.div_ceil(cfg.subsample);
        let t_eos_frame = ((n_end.max(1) - 1).div_ceil(cfg.subsample) + 1).min(t);
        let features = FeatureSequence {
            frames: Tensor::matrix(t0, d, data)?,
            speech_end_ms: n_end as u32 * cfg.hop_ms,
            domain_id,
            hop_ms: cfg.hop_ms,
        };
        Ok(Sample {
            utterance: Utterance {
                id: index,
                features,
                tokens,
                t_eos_frame,
                domain_id,
            },
            spoken,
            lead_frames: lead,
        })
    }

    /// Utterances `start .. start + count` of the dataset identified by `seed`.
    pub fn generate(&self, seed: u64, start: u64, count: usize) -> Result<Dataset> {
        if count == 0 {
            return Err(Error::config("dataset count must be at least 1"));
        }
        let utterances = (start..start + count as u64)
            .map(|i| self.sample(seed, i).map(|s| s.utterance))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            vocab: self.vocab.clone(),
            spelling: self.cfg.spelling_map()?,
            domain_names: self.cfg.domains.iter().map(|d| d.name.clone()).collect(),
            hop_ms: self.cfg.hop_ms,
            stack: self.cfg.stack,
            subsample: self.cfg.subsample,
            utterances,
        })
    }
}

/// Generates `count` utterances from `cfg` under `seed`.
pub fn synth_dataset(cfg: &DataConfig, seed: u64, count: usize) -> Result<Dataset> {
    Synthesizer::new(cfg.clone())?.generate(seed, 0, count)
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// A set of utterances with the metadata needed to interpret them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub spelling: SpellingMap,
    pub domain_names: Vec<String>,
    pub hop_ms: u32,
    pub stack: usize,
    pub subsample: usize,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn num_domains(&self) -> usize {
        self.domain_names.len()
    }

    pub fn frame_ms(&self) -> u32 {
        self.hop_ms * self.subsample as u32
    }

    /// Same metadata with a subset of the utterances.
    pub fn subset(&self, keep: impl Fn(&Utterance) -> bool) -> Dataset {
        Dataset {
            utterances: self
                .utterances
                .iter()
                .filter(|u| keep(u))
                .cloned()
                .collect(),
            ..self.meta_only()
        }
    }

    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let mut a = self.meta_only();
        let mut b = self.meta_only();
        a.utterances = self.utterances[..n].to_vec();
        b.utterances = self.utterances[n..].to_vec();
        (a, b)
    }

    fn meta_only(&self) -> Dataset {
        Dataset {
            vocab: self.vocab.clone(),
            spelling: self.spelling.clone(),
            domain_names: self.domain_names.clone(),
            hop_ms: self.hop_ms,
            stack: self.stack,
            subsample: self.subsample,
            utterances: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> DataConfig {
        DataConfig {
            noise_sigma: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = DataConfig::default();
        assert_eq!(cfg.domains.len(), 2);
        assert!(cfg.vocab().unwrap().len() <= 64);
        let back = DataConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn zero_noise_equals_templates_plus_silence() {
        let synth = Synthesizer::new(small_config()).unwrap();
        let s = synth.sample(3, 0).unwrap();
        let f = &s.utterance.features.frames;
        let fpt = synth.config().frames_per_token;
        let mut expected = vec![0.0; s.lead_frames * f.cols()];
        for unit in &s.spoken {
            expected.extend_from_slice(synth.template(unit).unwrap().data());
        }
        expected.resize(f.numel(), 0.0);
        assert_eq!(f.data(), &expected[..]);
        assert_eq!(
            s.utterance.features.speech_end_ms,
            ((s.lead_frames + s.spoken.len() * fpt) as u32) * synth.config().hop_ms
        );
    }

    #[test]
    fn same_seed_same_dataset() {
        let cfg = DataConfig::default();
        let a = synth_dataset(&cfg, 42, 20).unwrap();
        let b = synth_dataset(&cfg, 42, 20).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(&cfg, 43, 20).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn domain_mix_matches_weights() {
        let mut cfg = DataConfig::default();
        cfg.domains[0].weight = 0.875;
        cfg.domains[1].weight = 0.125;
        let synth = Synthesizer::new(cfg).unwrap();
        let mut ones = 0;
        for i in 0..10_000 {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            rng.set_stream(i);
            ones += synth.pick_domain(&mut rng);
        }
        let frac = ones as f64 / 10_000.0;
        assert!((frac - 0.125).abs() <= 0.01, "domain-1 fraction {frac}");
        let ds = synth.generate(1, 0, 2000).unwrap();
        let frac = ds.utterances.iter().filter(|u| u.domain_id == 1).count() as f64 / 2000.0;
        assert!((frac - 0.125).abs() <= 0.03);
    }

    #[test]
    fn eos_frame_tracks_speech_end() {
        let cfg = DataConfig::default();
        let ds = synth_dataset(&cfg, 5, 300).unwrap();
        let frame = cfg.frame_ms();
        for u in &ds.utterances {
            let t = u.features.num_frames().div_ceil(cfg.subsample);
            assert!(u.t_eos_frame >= 1 && u.t_eos_frame <= t);
            let by_time = u.features.speech_end_ms.div_ceil(frame) as i64;
            assert!((by_time - u.t_eos_frame as i64).abs() <= 1);
            assert!(!u.tokens.is_empty());
            assert!(u.features.speech_end_ms <= u.features.duration_ms());
            assert!(!u.tokens.contains(&Vocab::EOS_ID));
        }
    }

    #[test]
    fn conventions_differ_between_domains() {
        let cfg = DataConfig::default();
        let vocab = cfg.vocab().unwrap();
        let ds = synth_dataset(&cfg, 9, 400).unwrap();
        let digit = |id: TokenId| vocab.token(id).unwrap().chars().all(|c| c.is_ascii_digit());
        for u in &ds.utterances {
            let has_digit = u.tokens.iter().any(|&t| digit(t));
            if cfg.domains[u.domain_id].convention == Convention::Spoken {
                assert!(!has_digit);
            }
        }
        assert!(ds
            .utterances
            .iter()
            .any(|u| u.tokens.iter().any(|&t| digit(t))));
    }

    #[test]
    fn invalid_grammar_rejected() {
        let mut cfg = DataConfig::default();
        cfg.domains[0].patterns.push(vec!["nonword".into()]);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = DataConfig::default();
        cfg.domains.clear();
        assert!(cfg.validate().is_err());
        assert!(DataConfig::from_toml("feature_dim = 8").is_err());
        assert!(synth_dataset(&DataConfig::default(), 1, 0).is_err());
    }
}
