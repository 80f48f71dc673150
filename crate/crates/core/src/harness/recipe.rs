//! Experiment configuration and the stage drivers shared by the command-line
//! tool and the end-to-end tests.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::endpoint::VadConfig;
use super::pipeline::{
    best_tokens, decode_dataset, metrics_csv, records_for, rescore_decoded, summarize,
    DecodeConfig, DecodedUtterance, FirstPass, Metrics, SecondPass,
};
use super::sweep::SweepConfig;
use crate::error::{Error, Result};
use crate::frontend::{model_input, DataConfig, Dataset, Synthesizer};
use crate::las::{build_attention_cache, AttentionSourceCache, LasConfig, LasModel};
use crate::lattice::PrefixTreeLattice;
use crate::nncore::{ParamStore, Tensor};
use crate::rnnt::{EndpointerPenaltyConfig, RnnTConfig, RnnTModel, TimeReduction};
use crate::training::{
    las_examples, mwer_finetune, rnnt_examples, train_las_ce, train_rnnt, Method, ModelBundle,
    MwerConfig, MwerExample, MwerOutcome, OptimizerConfig, TrainOutcome,
};
use crate::vocab::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_count: usize,
    pub eval_count: usize,
    pub corpus: DataConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_count: 2000,
            eval_count: 500,
            corpus: DataConfig::default(),
        }
    }
}

/// First-pass sizes. Input width and vocabulary follow from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RnntSection {
    pub domain_onehot: bool,
    pub encoder_layers: usize,
    pub encoder_hidden: usize,
    pub encoder_proj: usize,
    pub time_reduction: Option<TimeReduction>,
    pub embed_dim: usize,
    pub pred_layers: usize,
    pub pred_hidden: usize,
    pub pred_proj: usize,
    pub joint_dim: usize,
}

impl Default for RnntSection {
    fn default() -> Self {
        let t = RnnTConfig::toy(1, 3);
        RnntSection {
            domain_onehot: true,
            encoder_layers: t.encoder_layers,
            encoder_hidden: t.encoder_hidden,
            encoder_proj: t.encoder_proj,
            time_reduction: t.time_reduction,
            embed_dim: t.embed_dim,
            pred_layers: t.pred_layers,
            pred_hidden: t.pred_hidden,
            pred_proj: t.pred_proj,
            joint_dim: t.joint_dim,
        }
    }
}

impl RnntSection {
    pub fn model_config(&self, data: &Dataset) -> RnnTConfig {
        let onehot = self.domain_onehot.then(|| data.num_domains());
        let feature_dim = data
            .utterances
            .first()
            .map_or(0, |u| u.features.frames.cols());
        RnnTConfig {
            input_dim: data.stack * feature_dim + onehot.unwrap_or(0),
            domain_onehot: onehot,
            encoder_layers: self.encoder_layers,
            encoder_hidden: self.encoder_hidden,
            encoder_proj: self.encoder_proj,
            time_reduction: self.time_reduction,
            embed_dim: self.embed_dim,
            pred_layers: self.pred_layers,
            pred_hidden: self.pred_hidden,
            pred_proj: self.pred_proj,
            joint_dim: self.joint_dim,
            vocab_size: data.vocab.len(),
        }
    }
}

/// Second-pass sizes. The source width is the first-pass encoder width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LasSection {
    pub encoder_layers: usize,
    pub encoder_hidden: usize,
    pub encoder_proj: usize,
    pub embed_dim: usize,
    pub decoder_layers: usize,
    pub decoder_hidden: usize,
    pub decoder_proj: usize,
    pub attention_dim: usize,
    pub attention_heads: usize,
}

impl Default for LasSection {
    fn default() -> Self {
        let t = LasConfig::toy(1, 3);
        LasSection {
            encoder_layers: t.encoder_layers,
            encoder_hidden: t.encoder_hidden,
            encoder_proj: t.encoder_proj,
            embed_dim: t.embed_dim,
            decoder_layers: t.decoder_layers,
            decoder_hidden: t.decoder_hidden,
            decoder_proj: t.decoder_proj,
            attention_dim: t.attention_dim,
            attention_heads: t.attention_heads,
        }
    }
}

impl LasSection {
    pub fn model_config(&self, rnnt: &RnnTConfig) -> LasConfig {
        LasConfig {
            source_dim: rnnt.encoder_proj,
            encoder_layers: self.encoder_layers,
            encoder_hidden: self.encoder_hidden,
            encoder_proj: self.encoder_proj,
            embed_dim: self.embed_dim,
            decoder_layers: self.decoder_layers,
            decoder_hidden: self.decoder_hidden,
            decoder_proj: self.decoder_proj,
            attention_dim: self.attention_dim,
            attention_heads: self.attention_heads,
            vocab_size: rnnt.vocab_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Interpolation weight used by `eval` when a second pass is present.
    pub lambda_las: f64,
    /// Weights reported by `rescore`.
    pub lambdas: Vec<f64>,
    pub batched_rescoring: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            lambda_las: 0.1,
            lambdas: vec![0.0, 0.1, 0.2, 0.3, 0.5],
            batched_rescoring: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub grid: Vec<SweepConfig>,
}

impl Default for SweepSection {
    fn default() -> Self {
        let vad = Some(VadConfig::default().silence_interval_ms);
        let point = |pen: f64, lambda: f64, eos: bool, vad: Option<u32>| SweepConfig {
            eos_decode_penalty: pen,
            lambda_las: lambda,
            eos_endpointing: eos,
            vad_interval_ms: vad,
        };
        let mut grid: Vec<SweepConfig> = [0.0, 1.0, 2.0, 4.0]
            .iter()
            .map(|&p| point(p, 0.0, true, vad))
            .collect();
        grid.push(point(0.0, 0.0, false, vad));
        grid.extend([0.1, 0.3].iter().map(|&l| point(0.0, l, true, vad)));
        SweepSection { grid }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub utterances: usize,
    pub repeats: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            utterances: 50,
            repeats: 3,
        }
    }
}

/// Everything one end-to-end run needs. A config file overrides any subset
/// of these fields; omitted fields keep the values of [`ExperimentConfig::default`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub rnnt: RnntSection,
    pub endpointer: EndpointerPenaltyConfig,
    pub train_rnnt: OptimizerConfig,
    pub las: LasSection,
    pub train_las: OptimizerConfig,
    pub mwer: MwerConfig,
    pub train_mwer: OptimizerConfig,
    pub decode: DecodeConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub bench: BenchSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let adam = |lr: f64, steps: usize| OptimizerConfig {
            learning_rate: lr,
            method: Method::adam(),
            batch_size: 8,
            max_steps: steps,
            clip_norm: Some(5.0),
            ema_decay: Some(0.99),
            ema_warmup: true,
            ..Default::default()
        };
        ExperimentConfig {
            data: DataSection::default(),
            rnnt: RnntSection::default(),
            endpointer: EndpointerPenaltyConfig {
                alpha_early: 0.0,
                alpha_late: 0.0,
                t_buffer: 2,
                enabled_domains: BTreeSet::from([0]),
            },
            train_rnnt: adam(3e-3, 3000),
            las: LasSection::default(),
            train_las: adam(3e-3, 3000),
            mwer: MwerConfig::default(),
            train_mwer: OptimizerConfig {
                batch_size: 4,
                ..adam(1e-4, 200)
            },
            decode: DecodeConfig {
                beam_size: 4,
                vad: Some(VadConfig::default()),
                ..Default::default()
            },
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            bench: BenchSection::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Parses `text` as overrides on top of the defaults. Tables merge key by
    /// key; arrays and scalars replace.
    pub fn from_toml(text: &str) -> Result<Self> {
        let over: toml::Value =
            toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        let mut base = toml::Value::try_from(ExperimentConfig::default())
            .map_err(|e| Error::config(format!("config defaults: {e}")))?;
        merge(&mut base, over);
        let cfg: ExperimentConfig = base
            .try_into()
            .map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.train_count == 0 || self.data.eval_count == 0 {
            return Err(Error::config("train_count and eval_count must be positive"));
        }
        self.data.corpus.validate()?;
        self.endpointer.validate()?;
        for opt in [&self.train_rnnt, &self.train_las, &self.train_mwer] {
            opt.validate()?;
        }
        self.decode.validate()?;
        for &l in self.eval.lambdas.iter().chain([&self.eval.lambda_las]) {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::config("interpolation weights must be in [0, 1]"));
            }
        }
        if self.bench.utterances == 0 {
            return Err(Error::config("bench.utterances must be positive"));
        }
        Ok(())
    }
}

/// Training and evaluation sets drawn from disjoint utterance indices of one seed.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub eval: Dataset,
}

pub fn generate_splits(cfg: &ExperimentConfig, seed: u64) -> Result<Splits> {
    let synth = Synthesizer::new(cfg.data.corpus.clone())?;
    let n = cfg.data.train_count;
    Ok(Splits {
        train: synth.generate(seed, 0, n)?,
        eval: synth.generate(seed, n as u64, cfg.data.eval_count)?,
    })
}

fn with_seed(opt: &OptimizerConfig, seed: u64) -> OptimizerConfig {
    OptimizerConfig {
        seed,
        ..opt.clone()
    }
}

/// Trained first pass. The bundle holds the evaluation (EMA) weights.
#[derive(Clone, Debug)]
pub struct RnntRun {
    pub bundle: ModelBundle,
    pub outcome: TrainOutcome,
}

pub fn run_train_rnnt(cfg: &ExperimentConfig, seed: u64, train: &Dataset) -> Result<RnntRun> {
    let examples = rnnt_examples(train, cfg.rnnt.domain_onehot)?;
    let rnnt_cfg = cfg.rnnt.model_config(train);
    let mut store = ParamStore::new();
    let model = RnnTModel::new(
        rnnt_cfg.clone(),
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )?;
    let outcome = train_rnnt(
        &examples,
        &model,
        &mut store,
        &with_seed(&cfg.train_rnnt, seed),
        &cfg.endpointer,
    )?;
    let bundle = ModelBundle {
        vocab: train.vocab.clone(),
        rnnt_cfg,
        rnnt: outcome.eval_params(&store).clone(),
        las: None,
        notes: serde_json::json!({ "stage": "rnnt", "seed": seed }),
    };
    Ok(RnntRun { bundle, outcome })
}

/// Trains a second pass on top of a frozen first pass.
pub fn run_train_las(
    cfg: &ExperimentConfig,
    seed: u64,
    bundle: &ModelBundle,
    train: &Dataset,
) -> Result<(ModelBundle, TrainOutcome)> {
    let rnnt = RnnTModel::bind(bundle.rnnt_cfg.clone(), &bundle.rnnt)?;
    let examples = rnnt_examples(train, bundle.rnnt_cfg.domain_onehot.is_some())?;
    let las_data = las_examples(&examples, &rnnt, &bundle.rnnt)?;
    let las_cfg = cfg.las.model_config(&bundle.rnnt_cfg);
    let mut store = ParamStore::new();
    let las = LasModel::new(
        las_cfg.clone(),
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)),
    )?;
    let outcome = train_las_ce(
        &las_data,
        &las,
        &mut store,
        &with_seed(&cfg.train_las, seed),
    )?;
    let mut out = bundle.clone();
    out.las = Some((las_cfg, outcome.eval_params(&store).clone()));
    out.notes = serde_json::json!({ "stage": "las", "seed": seed });
    Ok((out, outcome))
}

/// Both passes rebound from a bundle.
pub struct Models {
    pub rnnt: RnnTModel,
    pub las: Option<LasModel>,
}

impl Models {
    pub fn bind(bundle: &ModelBundle) -> Result<Self> {
        let rnnt = RnnTModel::bind(bundle.rnnt_cfg.clone(), &bundle.rnnt)?;
        let las = match &bundle.las {
            Some((c, p)) => Some(LasModel::bind(c.clone(), p)?),
            None => None,
        };
        Ok(Models { rnnt, las })
    }

    pub fn first<'a>(&'a self, bundle: &'a ModelBundle) -> FirstPass<'a> {
        FirstPass {
            model: &self.rnnt,
            params: &bundle.rnnt,
            onehot_domains: bundle.rnnt_cfg.domain_onehot,
        }
    }

    pub fn second<'a>(&'a self, bundle: &'a ModelBundle) -> Option<SecondPass<'a>> {
        match (&self.las, &bundle.las) {
            (Some(model), Some((_, params))) => Some(SecondPass { model, params }),
            _ => None,
        }
    }

    pub fn require_second<'a>(&'a self, bundle: &'a ModelBundle) -> Result<SecondPass<'a>> {
        self.second(bundle)
            .ok_or_else(|| Error::contract("checkpoint has no second-pass model"))
    }
}

/// MWER fine-tuning of the second pass on n-best lists decoded from `train`.
pub fn run_mwer(
    cfg: &ExperimentConfig,
    seed: u64,
    bundle: &ModelBundle,
    train: &Dataset,
) -> Result<(ModelBundle, MwerOutcome)> {
    let models = Models::bind(bundle)?;
    let las = models
        .las
        .as_ref()
        .ok_or_else(|| Error::contract("MWER needs a trained second pass"))?;
    let decodes = decode_dataset(models.first(bundle), train, &cfg.decode)?;
    let spelling = &train.spelling;
    let examples: Vec<MwerExample> = train
        .utterances
        .iter()
        .zip(decodes)
        .map(|(u, d)| {
            MwerExample::from_lattice(
                d.encoded,
                u.tokens.clone(),
                &d.lattice,
                cfg.mwer.nbest_size,
                |t| spelling.normalize_ids(t, &train.vocab),
            )
        })
        .collect();
    let (las_cfg, params) = bundle.las.clone().expect("bound above");
    let mut store = params;
    let outcome = mwer_finetune(
        &examples,
        las,
        &mut store,
        &with_seed(&cfg.train_mwer, seed),
        &cfg.mwer,
    )?;
    let mut out = bundle.clone();
    out.las = Some((las_cfg, outcome.train.eval_params(&store).clone()));
    out.notes = serde_json::json!({ "stage": "mwer", "seed": seed });
    Ok((out, outcome))
}

/// First-pass decode of `eval` and, with a second pass, rescoring at each
/// weight in `lambdas`.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub decodes: Vec<DecodedUtterance>,
    pub first_pass: Metrics,
    pub rescored_lattices: Option<Vec<PrefixTreeLattice>>,
    pub rescored: Vec<(f64, Metrics)>,
}

impl Evaluation {
    pub fn rows(&self) -> Vec<(String, Metrics)> {
        let mut rows = vec![("first_pass".to_string(), self.first_pass.clone())];
        rows.extend(
            self.rescored
                .iter()
                .map(|(l, m)| (format!("lambda={l}"), m.clone())),
        );
        rows
    }

    pub fn csv(&self) -> String {
        metrics_csv(&self.rows())
    }
}

pub fn evaluate(
    cfg: &ExperimentConfig,
    bundle: &ModelBundle,
    eval: &Dataset,
    decode: &DecodeConfig,
    lambdas: &[f64],
) -> Result<Evaluation> {
    let models = Models::bind(bundle)?;
    let decodes = decode_dataset(models.first(bundle), eval, decode)?;
    rescore_and_score(cfg, &models, bundle, eval, decodes, lambdas)
}

fn rescore_and_score(
    cfg: &ExperimentConfig,
    models: &Models,
    bundle: &ModelBundle,
    eval: &Dataset,
    decodes: Vec<DecodedUtterance>,
    lambdas: &[f64],
) -> Result<Evaluation> {
    let frame_ms = eval.frame_ms() * bundle.rnnt_cfg.reduction_factor() as u32;
    let first_pass = summarize(&records_for(eval, &decodes, None, frame_ms)?)?;
    let mut rescored = Vec::new();
    let mut lattices = None;
    if let (Some(second), false) = (models.second(bundle), lambdas.is_empty()) {
        let lats = decodes
            .iter()
            .map(|d| rescore_decoded(second, d, cfg.eval.batched_rescoring))
            .collect::<Result<Vec<_>>>()?;
        for &l in lambdas {
            let hyps = lats
                .iter()
                .map(|lat| best_tokens(lat, l))
                .collect::<Result<Vec<_>>>()?;
            rescored.push((
                l,
                summarize(&records_for(eval, &decodes, Some(&hyps), frame_ms)?)?,
            ));
        }
        lattices = Some(lats);
    }
    Ok(Evaluation {
        decodes,
        first_pass,
        rescored_lattices: lattices,
        rescored,
    })
}

const DECODE_INDEX: &str = "decodes.csv";

/// Writes one lattice file per utterance plus an index of close frames.
pub fn write_decodes(dir: &Path, ds: &Dataset, decodes: &[DecodedUtterance]) -> Result<()> {
    write_lattices(dir, ds, decodes.iter().map(|d| (d.id, &d.lattice)))?;
    let opt = |v: Option<usize>| v.map_or_else(String::new, |x| x.to_string());
    let mut index =
        String::from("id,domain_id,frames_decoded,eos_close_frame,vad_close_frame,hypothesis\n");
    for d in decodes {
        let hyp: Vec<String> = d.hypothesis.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(
            index,
            "{},{},{},{},{},{}",
            d.id,
            d.domain_id,
            d.frames_decoded,
            opt(d.eos_close_frame),
            opt(d.vad_close_frame),
            hyp.join(" ")
        );
    }
    fs::write(dir.join(DECODE_INDEX), index)?;
    Ok(())
}

pub fn write_lattices<'a>(
    dir: &Path,
    ds: &Dataset,
    lattices: impl IntoIterator<Item = (u64, &'a PrefixTreeLattice)>,
) -> Result<()> {
    let lat_dir = dir.join("lattices");
    fs::create_dir_all(&lat_dir)?;
    let hash = ds.vocab.hash();
    for (id, lat) in lattices {
        fs::write(
            lat_dir.join(format!("{id}.lat")),
            lat.to_text(&id.to_string(), &hash),
        )?;
    }
    Ok(())
}

/// Reloads the output of [`write_decodes`], recomputing the truncated
/// encoder output of each utterance from `ds`.
pub fn read_decodes(dir: &Path, first: FirstPass, ds: &Dataset) -> Result<Vec<DecodedUtterance>> {
    let index = fs::read_to_string(dir.join(DECODE_INDEX))?;
    let hash = ds.vocab.hash();
    let mut out = Vec::with_capacity(ds.len());
    let mut lines = index.lines();
    lines.next();
    for (line, u) in lines.zip(&ds.utterances) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::format(format!("bad decode index row: {line}")));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format(format!("bad number {s:?}")))
        };
        let opt = |s: &str| {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        let id = num(f[0])? as u64;
        if id != u.id {
            return Err(Error::contract(format!(
                "decode index row {id} does not match utterance {}",
                u.id
            )));
        }
        let (header, lattice) = PrefixTreeLattice::from_text(&fs::read_to_string(
            dir.join("lattices").join(format!("{id}.lat")),
        )?)?;
        if header.vocab_hash != hash {
            return Err(Error::contract(format!(
                "lattice {id} was written with a different vocabulary"
            )));
        }
        let frames_decoded = num(f[2])?;
        let (eos_close_frame, vad_close_frame) = (opt(f[3])?, opt(f[4])?);
        let hypothesis = f[5]
            .split_whitespace()
            .map(|t| num(t).map(|v| v as TokenId))
            .collect::<Result<_>>()?;
        let input = model_input(&u.features, ds.stack, ds.subsample, first.onehot_domains)?;
        let encoded = first.model.encode(first.params, &input)?;
        let keep = frames_decoded.max(1).min(encoded.rows());
        let encoded = Tensor::from_rows(
            &(0..keep)
                .map(|t| encoded.row(t).to_vec())
                .collect::<Vec<_>>(),
        )?;
        let mic_close_frame = match (eos_close_frame, vad_close_frame) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        out.push(DecodedUtterance {
            id,
            domain_id: num(f[1])?,
            hypothesis,
            lattice,
            eos_close_frame,
            vad_close_frame,
            mic_close_frame,
            frames_decoded,
            encoded,
        });
    }
    if out.len() != ds.len() {
        return Err(Error::contract(
            "decode index does not cover the evaluation set",
        ));
    }
    Ok(out)
}

/// Rescores previously written decodes.
pub fn rescore_saved(
    cfg: &ExperimentConfig,
    bundle: &ModelBundle,
    dir: &Path,
    eval: &Dataset,
    lambdas: &[f64],
) -> Result<Evaluation> {
    let models = Models::bind(bundle)?;
    models.require_second(bundle)?;
    let decodes = read_decodes(dir, models.first(bundle), eval)?;
    rescore_and_score(cfg, &models, bundle, eval, decodes, lambdas)
}

/// Decoded and cached inputs for timing the second pass on the first
/// `cfg.bench.utterances` evaluation utterances.
pub fn build_rescore_bench(
    cfg: &ExperimentConfig,
    models: &Models,
    bundle: &ModelBundle,
    eval: &Dataset,
) -> Result<Vec<(PrefixTreeLattice, AttentionSourceCache)>> {
    let second = models.require_second(bundle)?;
    let (subset, _) = eval.split_at(cfg.bench.utterances.min(eval.len()));
    decode_dataset(models.first(bundle), &subset, &cfg.decode)?
        .into_iter()
        .filter(|d| d.lattice.num_arcs() > 0)
        .map(|d| {
            Ok((
                d.lattice,
                build_attention_cache(second.model, second.params, &d.encoded)?,
            ))
        })
        .collect()
}
