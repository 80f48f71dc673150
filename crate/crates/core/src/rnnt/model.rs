use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lattice::RnnTLogProbLattice;
use crate::error::{Error, Result};
use crate::nncore::{
    kernels, lookup, Eager, Linear, LstmLayer, LstmState, Ops, ParamId, ParamStore, Tensor,
};
use crate::vocab::{TokenId, Vocab};

/// Initial joint-output bias of blank.
pub const BLANK_BIAS_INIT: f64 = 4.0;

/// Concatenation of `factor` adjacent frames after encoder layer `after_layer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeReduction {
    pub after_layer: usize,
    pub factor: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RnnTConfig {
    /// Width of the encoder input, including the domain one-hot if any.
    pub input_dim: usize,
    /// Number of domains in the one-hot suffix; `None` disables conditioning.
    #[serde(default)]
    pub domain_onehot: Option<usize>,
    pub encoder_layers: usize,
    pub encoder_hidden: usize,
    pub encoder_proj: usize,
    #[serde(default)]
    pub time_reduction: Option<TimeReduction>,
    pub embed_dim: usize,
    pub pred_layers: usize,
    pub pred_hidden: usize,
    pub pred_proj: usize,
    pub joint_dim: usize,
    pub vocab_size: usize,
}

impl RnnTConfig {
    /// Toy-scale defaults for a given encoder input width and vocabulary.
    pub fn toy(input_dim: usize, vocab_size: usize) -> Self {
        RnnTConfig {
            input_dim,
            domain_onehot: None,
            encoder_layers: 2,
            encoder_hidden: 64,
            encoder_proj: 32,
            time_reduction: None,
            embed_dim: 16,
            pred_layers: 1,
            pred_hidden: 64,
            pred_proj: 32,
            joint_dim: 64,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.encoder_layers == 0 || self.pred_layers == 0 {
            return Err(Error::config("input_dim and layer counts must be positive"));
        }
        if self.vocab_size < 3 {
            return Err(Error::config(
                "vocabulary needs blank, </s> and at least one token",
            ));
        }
        if let Some(tr) = self.time_reduction {
            if tr.factor < 2 || tr.after_layer == 0 || tr.after_layer >= self.encoder_layers {
                return Err(Error::config(
                    "time reduction needs factor >= 2 between two encoder layers",
                ));
            }
        }
        if let Some(d) = self.domain_onehot {
            if d == 0 || d >= self.input_dim {
                return Err(Error::config(
                    "domain one-hot width must be positive and below input_dim",
                ));
            }
        }
        Ok(())
    }

    /// Encoder frames per input frame.
    pub fn reduction_factor(&self) -> usize {
        self.time_reduction.map_or(1, |t| t.factor)
    }
}

/// Shared encoder, prediction network and joint network.
#[derive(Clone, Debug)]
pub struct RnnTModel {
    pub cfg: RnnTConfig,
    pub encoder: Vec<LstmLayer>,
    pub embedding: ParamId,
    pub pred: Vec<LstmLayer>,
    pub joint_enc: Linear,
    pub joint_pred: Linear,
    pub joint_out: Linear,
}

impl RnnTModel {
    pub fn new<R: Rng + ?Sized>(
        cfg: RnnTConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut encoder = Vec::new();
        let mut dim = cfg.input_dim;
        for l in 0..cfg.encoder_layers {
            if cfg.time_reduction.is_some_and(|t| t.after_layer == l) {
                dim *= cfg.reduction_factor();
            }
            encoder.push(LstmLayer::new(
                store,
                &format!("enc.{l}"),
                dim,
                cfg.encoder_hidden,
                cfg.encoder_proj,
                rng,
            )?);
            dim = cfg.encoder_proj;
        }
        let embedding = store.init_uniform(
            "pred.embed",
            vec![cfg.vocab_size, cfg.embed_dim],
            cfg.embed_dim,
            rng,
        )?;
        let mut pred = Vec::new();
        let mut dim = cfg.embed_dim;
        for l in 0..cfg.pred_layers {
            pred.push(LstmLayer::new(
                store,
                &format!("pred.{l}"),
                dim,
                cfg.pred_hidden,
                cfg.pred_proj,
                rng,
            )?);
            dim = cfg.pred_proj;
        }
        let joint_enc = Linear::new(
            store,
            "joint.enc",
            cfg.encoder_proj,
            cfg.joint_dim,
            true,
            rng,
        )?;
        let joint_pred = Linear::new(
            store,
            "joint.pred",
            cfg.pred_proj,
            cfg.joint_dim,
            false,
            rng,
        )?;
        let joint_out = Linear::new(store, "joint.out", cfg.joint_dim, cfg.vocab_size, true, rng)?;
        // Untrained models otherwise assign blank about 1/|V| per frame, and the
        // resulting loss spike saturates the joint tanh before the encoder learns.
        let out_bias = joint_out.bias.expect("joint output has a bias");
        store.tensor_mut(out_bias).data_mut()[Vocab::BLANK_ID] = BLANK_BIAS_INIT;
        Ok(RnnTModel {
            cfg,
            encoder,
            embedding,
            pred,
            joint_enc,
            joint_pred,
            joint_out,
        })
    }

    /// Rebinds a model to parameters loaded from a checkpoint.
    pub fn bind(cfg: RnnTConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let encoder = (0..cfg.encoder_layers)
            .map(|l| LstmLayer::bind(store, &format!("enc.{l}")))
            .collect::<Result<Vec<_>>>()?;
        let pred = (0..cfg.pred_layers)
            .map(|l| LstmLayer::bind(store, &format!("pred.{l}")))
            .collect::<Result<Vec<_>>>()?;
        let model = RnnTModel {
            embedding: lookup(store, "pred.embed")?,
            joint_enc: Linear::bind(store, "joint.enc", true)?,
            joint_pred: Linear::bind(store, "joint.pred", false)?,
            joint_out: Linear::bind(store, "joint.out", true)?,
            cfg,
            encoder,
            pred,
        };
        if model.encoder[0].input_dim != model.cfg.input_dim
            || model.joint_out.out_dim != model.cfg.vocab_size
            || store.get(model.embedding).rows() != model.cfg.vocab_size
        {
            return Err(Error::format(
                "checkpoint tensors do not match the model config",
            ));
        }
        Ok(model)
    }

    fn lower(&self) -> &[LstmLayer] {
        let split = self
            .cfg
            .time_reduction
            .map_or(self.encoder.len(), |t| t.after_layer);
        &self.encoder[..split]
    }

    fn upper(&self) -> &[LstmLayer] {
        let split = self
            .cfg
            .time_reduction
            .map_or(self.encoder.len(), |t| t.after_layer);
        &self.encoder[split..]
    }

    /// Whole-sequence encoding of a batch of `T_b x input_dim` inputs. Shorter
    /// inputs are zero padded; padding only follows real frames so it never
    /// reaches them. Returns `ceil(T_b / factor) x encoder_proj` per input.
    pub fn encode_batch<O: Ops>(&self, o: &mut O, inputs: &[&Tensor]) -> Result<Vec<O::V>> {
        let b = inputs.len();
        let d = self.cfg.input_dim;
        for x in inputs {
            if x.cols() != d || x.rows() == 0 {
                return Err(Error::shape(format!(
                    "encoder input {}x{}, expected T x {d} with T >= 1",
                    x.rows(),
                    x.cols()
                )));
            }
        }
        let t_max = inputs.iter().map(|x| x.rows()).max().unwrap_or(0);
        let mut lower_states: Vec<LstmState<O::V>> =
            self.lower().iter().map(|l| l.zero_state(o, b)).collect();
        let mut lower_out = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let mut frame = vec![0.0; b * d];
            for (i, x) in inputs.iter().enumerate() {
                if t < x.rows() {
                    frame[i * d..(i + 1) * d].copy_from_slice(x.row(t));
                }
            }
            let mut h = o.constant(Tensor::matrix(b, d, frame)?);
            for (layer, state) in self.lower().iter().zip(lower_states.iter_mut()) {
                *state = layer.step(o, state, &h)?;
                h = state.hidden.clone();
            }
            lower_out.push(h);
        }
        let f = self.cfg.reduction_factor();
        let mut outputs = lower_out;
        if f > 1 {
            let t_red = t_max.div_ceil(f);
            let width = self.cfg.encoder_proj;
            let mut upper_states: Vec<LstmState<O::V>> =
                self.upper().iter().map(|l| l.zero_state(o, b)).collect();
            let mut reduced = Vec::with_capacity(t_red);
            for t in 0..t_red {
                let mut parts = Vec::with_capacity(f);
                for k in 0..f {
                    match outputs.get(t * f + k) {
                        Some(v) => parts.push(v.clone()),
                        None => parts.push(o.constant(Tensor::zeros(vec![b, width]))),
                    }
                }
                let mut h = o.concat_cols(&parts)?;
                for (layer, state) in self.upper().iter().zip(upper_states.iter_mut()) {
                    *state = layer.step(o, state, &h)?;
                    h = state.hidden.clone();
                }
                reduced.push(h);
            }
            outputs = reduced;
        }
        let stacked = o.concat_rows(&outputs)?;
        inputs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let len = x.rows().div_ceil(f);
                let rows: Vec<usize> = (0..len).map(|t| t * b + i).collect();
                o.gather_rows(&stacked, &rows)
            })
            .collect()
    }

    /// Prediction-network outputs after each prefix of `labels`, as
    /// `(U_b + 1) x pred_proj` per sequence. Row 0 is the start state, fed the
    /// blank embedding.
    pub fn predict_batch<O: Ops>(&self, o: &mut O, labels: &[&[TokenId]]) -> Result<Vec<O::V>> {
        let b = labels.len();
        let v = self.cfg.vocab_size;
        for seq in labels {
            if let Some(&bad) = seq.iter().find(|&&t| t >= v || t == Vocab::BLANK_ID) {
                return Err(Error::contract(format!(
                    "label {bad} is blank or outside the vocabulary"
                )));
            }
        }
        let u_max = labels.iter().map(|s| s.len()).max().unwrap_or(0);
        let table = o.param(self.embedding);
        let mut states: Vec<LstmState<O::V>> =
            self.pred.iter().map(|l| l.zero_state(o, b)).collect();
        let mut outputs = Vec::with_capacity(u_max + 1);
        for u in 0..=u_max {
            let ids: Vec<usize> = labels
                .iter()
                .map(|s| {
                    if u == 0 {
                        Vocab::BLANK_ID
                    } else {
                        s.get(u - 1).copied().unwrap_or(Vocab::BLANK_ID)
                    }
                })
                .collect();
            let mut h = o.gather_rows(&table, &ids)?;
            for (layer, state) in self.pred.iter().zip(states.iter_mut()) {
                *state = layer.step(o, state, &h)?;
                h = state.hidden.clone();
            }
            outputs.push(h);
        }
        let stacked = o.concat_rows(&outputs)?;
        labels
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let rows: Vec<usize> = (0..=s.len()).map(|u| u * b + i).collect();
                o.gather_rows(&stacked, &rows)
            })
            .collect()
    }

    /// Joint-network log-probabilities for every `(u, t)` pair, as a
    /// `(U+1)·T x |V|` matrix with row `u·T + t`.
    pub fn joint_grid<O: Ops>(&self, o: &mut O, enc: &O::V, pred: &O::V) -> Result<O::V> {
        let e = self.joint_enc.forward(o, enc)?;
        let p = self.joint_pred.forward(o, pred)?;
        let s = o.outer_sum(&e, &p)?;
        let h = o.tanh(&s);
        let logits = self.joint_out.forward(o, &h)?;
        Ok(o.log_softmax(&logits))
    }

    /// Whole-sequence encoder output for one utterance.
    pub fn encode(&self, store: &ParamStore, input: &Tensor) -> Result<Tensor> {
        let mut o = Eager::new(store);
        let out = self.encode_batch(&mut o, &[input])?;
        Ok(Arc::unwrap_or_clone(
            out.into_iter().next().expect("one output per input"),
        ))
    }

    /// Per-cell transducer log-probabilities for `labels` given encoder output.
    pub fn compute_lattice(
        &self,
        store: &ParamStore,
        enc: &Tensor,
        labels: &[TokenId],
    ) -> Result<RnnTLogProbLattice> {
        let mut o = Eager::new(store);
        let pred = self
            .predict_batch(&mut o, &[labels])?
            .pop()
            .expect("one sequence");
        let e = o.constant(enc.clone());
        let grid = self.joint_grid(&mut o, &e, &pred)?;
        RnnTLogProbLattice::from_grid(enc.rows(), labels.len(), Arc::unwrap_or_clone(grid))
    }

    pub fn encoder_stream(&self, store: &ParamStore) -> EncoderStream {
        let mut o = Eager::new(store);
        EncoderStream {
            lower: self
                .lower()
                .iter()
                .map(|l| l.zero_state(&mut o, 1))
                .collect(),
            upper: self
                .upper()
                .iter()
                .map(|l| l.zero_state(&mut o, 1))
                .collect(),
            pending: Vec::new(),
        }
    }

    /// Prediction state before any label.
    pub fn pred_start(&self, store: &ParamStore) -> Result<PredState> {
        let mut o = Eager::new(store);
        let states: Vec<_> = self.pred.iter().map(|l| l.zero_state(&mut o, 1)).collect();
        self.pred_advance(store, &states, Vocab::BLANK_ID)
    }

    /// Prediction state after additionally consuming `token`.
    pub fn pred_extend(
        &self,
        store: &ParamStore,
        state: &PredState,
        token: TokenId,
    ) -> Result<PredState> {
        if token >= self.cfg.vocab_size || token == Vocab::BLANK_ID {
            return Err(Error::contract(format!(
                "cannot extend a hypothesis with token {token}"
            )));
        }
        self.pred_advance(store, &state.lstm, token)
    }

    fn pred_advance(
        &self,
        store: &ParamStore,
        states: &[LstmState<Arc<Tensor>>],
        token: TokenId,
    ) -> Result<PredState> {
        let mut o = Eager::new(store);
        let table = o.param(self.embedding);
        let mut h = o.gather_rows(&table, &[token])?;
        let mut next = Vec::with_capacity(states.len());
        for (layer, state) in self.pred.iter().zip(states) {
            let s = layer.step(&mut o, state, &h)?;
            h = s.hidden.clone();
            next.push(s);
        }
        let joint = self.joint_pred.forward(&mut o, &h)?;
        Ok(PredState { lstm: next, joint })
    }

    /// Joint input contribution of one encoder frame (`1 x joint_dim`, bias included).
    pub fn joint_enc_frame(&self, store: &ParamStore, frame: &Tensor) -> Result<Tensor> {
        let mut o = Eager::new(store);
        let f = o.constant(frame.clone());
        Ok(Arc::unwrap_or_clone(self.joint_enc.forward(&mut o, &f)?))
    }

    /// Output distribution for one (encoder frame, prediction state) pair.
    pub fn joint_step(
        &self,
        store: &ParamStore,
        enc_joint: &Tensor,
        pred: &PredState,
    ) -> Result<Vec<f64>> {
        let s = kernels::add(enc_joint, &pred.joint)?;
        let h = s.map(f64::tanh);
        let mut o = Eager::new(store);
        let hv = o.constant(h);
        let logits = self.joint_out.forward(&mut o, &hv)?;
        Ok(kernels::log_softmax_rows(&logits).into_data())
    }
}

/// Prediction-network LSTM state plus its joint-network projection.
#[derive(Clone, Debug)]
pub struct PredState {
    pub lstm: Vec<LstmState<Arc<Tensor>>>,
    pub joint: Arc<Tensor>,
}

/// Incremental encoder: one input frame in, encoder frames out as soon as
/// they are determined.
#[derive(Clone, Debug)]
pub struct EncoderStream {
    lower: Vec<LstmState<Arc<Tensor>>>,
    upper: Vec<LstmState<Arc<Tensor>>>,
    pending: Vec<Arc<Tensor>>,
}

impl EncoderStream {
    pub fn push(
        &mut self,
        model: &RnnTModel,
        store: &ParamStore,
        frame: &[f64],
    ) -> Result<Option<Tensor>> {
        if frame.len() != model.cfg.input_dim {
            return Err(Error::shape(format!(
                "encoder frame has {} features, expected {}",
                frame.len(),
                model.cfg.input_dim
            )));
        }
        let mut o = Eager::new(store);
        let mut h = o.constant(Tensor::row_vector(frame.to_vec()));
        for (layer, state) in model.lower().iter().zip(self.lower.iter_mut()) {
            *state = layer.step(&mut o, state, &h)?;
            h = state.hidden.clone();
        }
        if model.cfg.time_reduction.is_none() {
            return Ok(Some(Arc::unwrap_or_clone(h)));
        }
        self.pending.push(h);
        if self.pending.len() < model.cfg.reduction_factor() {
            return Ok(None);
        }
        self.emit(model, store).map(Some)
    }

    /// Flushes a partially filled time-reduction window, zero padded.
    pub fn finish(&mut self, model: &RnnTModel, store: &ParamStore) -> Result<Option<Tensor>> {
        if self.pending.is_empty() {
            return Ok(None);
        }
        while self.pending.len() < model.cfg.reduction_factor() {
            self.pending
                .push(Arc::new(Tensor::zeros(vec![1, model.cfg.encoder_proj])));
        }
        self.emit(model, store).map(Some)
    }

    fn emit(&mut self, model: &RnnTModel, store: &ParamStore) -> Result<Tensor> {
        let mut o = Eager::new(store);
        let parts: Vec<Arc<Tensor>> = std::mem::take(&mut self.pending);
        let mut h = o.concat_cols(&parts)?;
        for (layer, state) in model.upper().iter().zip(self.upper.iter_mut()) {
            *state = layer.step(&mut o, state, &h)?;
            h = state.hidden.clone();
        }
        Ok(Arc::unwrap_or_clone(h))
    }
}

/// Streams `input` through the encoder frame by frame, flushing at the end.
pub fn encode_stream(model: &RnnTModel, store: &ParamStore, input: &Tensor) -> Result<Tensor> {
    let mut stream = model.encoder_stream(store);
    let mut rows = Vec::new();
    for t in 0..input.rows() {
        if let Some(e) = stream.push(model, store, input.row(t))? {
            rows.push(e);
        }
    }
    if let Some(e) = stream.finish(model, store)? {
        rows.push(e);
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    if refs.is_empty() {
        return Ok(Tensor::zeros(vec![0, model.cfg.encoder_proj]));
    }
    kernels::concat_rows(&refs)
}
