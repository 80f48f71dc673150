use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{
    kernels, lookup, Eager, Graph, Linear, LstmLayer, LstmState, MultiHeadAttention, Ops, ParamId,
    ParamStore, Tensor, Var,
};
use crate::vocab::{TokenId, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LasConfig {
    /// Width of the shared-encoder output.
    pub source_dim: usize,
    pub encoder_layers: usize,
    pub encoder_hidden: usize,
    pub encoder_proj: usize,
    pub embed_dim: usize,
    pub decoder_layers: usize,
    pub decoder_hidden: usize,
    pub decoder_proj: usize,
    pub attention_dim: usize,
    pub attention_heads: usize,
    pub vocab_size: usize,
}

impl LasConfig {
    pub fn toy(source_dim: usize, vocab_size: usize) -> Self {
        LasConfig {
            source_dim,
            encoder_layers: 2,
            encoder_hidden: 64,
            encoder_proj: 32,
            embed_dim: 16,
            decoder_layers: 2,
            decoder_hidden: 64,
            decoder_proj: 32,
            attention_dim: 32,
            attention_heads: 4,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_dim == 0 || self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::config(
                "LAS dimensions and layer counts must be positive",
            ));
        }
        if self.attention_heads == 0 || !self.attention_dim.is_multiple_of(self.attention_heads) {
            return Err(Error::config(
                "attention_dim must be divisible by attention_heads",
            ));
        }
        if self.vocab_size < 3 {
            return Err(Error::config(
                "vocabulary needs blank, </s> and at least one token",
            ));
        }
        Ok(())
    }
}

/// Projected attention keys and values of the additional-encoder output.
/// Head `h` owns columns `h·d_k .. (h+1)·d_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSourceCache {
    pub keys: Tensor,
    pub values: Tensor,
}

impl AttentionSourceCache {
    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Decoder recurrent state and the previous attention context, `B` rows each.
#[derive(Clone, Debug)]
pub struct DecoderState<V> {
    pub lstm: Vec<LstmState<V>>,
    pub context: V,
}

/// Additional encoder, attention and decoder of the second pass.
#[derive(Clone, Debug)]
pub struct LasModel {
    pub cfg: LasConfig,
    pub encoder: Vec<LstmLayer>,
    pub embedding: ParamId,
    pub decoder: Vec<LstmLayer>,
    pub attention: MultiHeadAttention,
    pub output: Linear,
}

impl LasModel {
    pub fn new<R: Rng + ?Sized>(
        cfg: LasConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut encoder = Vec::new();
        let mut dim = cfg.source_dim;
        for l in 0..cfg.encoder_layers {
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
            "embed",
            vec![cfg.vocab_size, cfg.embed_dim],
            cfg.embed_dim,
            rng,
        )?;
        let mut decoder = Vec::new();
        let mut dim = cfg.embed_dim + cfg.attention_dim;
        for l in 0..cfg.decoder_layers {
            decoder.push(LstmLayer::new(
                store,
                &format!("dec.{l}"),
                dim,
                cfg.decoder_hidden,
                cfg.decoder_proj,
                rng,
            )?);
            dim = cfg.decoder_proj;
        }
        let attention = MultiHeadAttention::new(
            store,
            "att",
            cfg.decoder_proj,
            cfg.encoder_proj,
            cfg.attention_dim,
            cfg.attention_heads,
            rng,
        )?;
        let output = Linear::new(
            store,
            "out",
            cfg.decoder_proj + cfg.attention_dim,
            cfg.vocab_size,
            true,
            rng,
        )?;
        Ok(LasModel {
            cfg,
            encoder,
            embedding,
            decoder,
            attention,
            output,
        })
    }

    pub fn bind(cfg: LasConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let encoder = (0..cfg.encoder_layers)
            .map(|l| LstmLayer::bind(store, &format!("enc.{l}")))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..cfg.decoder_layers)
            .map(|l| LstmLayer::bind(store, &format!("dec.{l}")))
            .collect::<Result<Vec<_>>>()?;
        let model = LasModel {
            embedding: lookup(store, "embed")?,
            attention: MultiHeadAttention::bind(store, "att", cfg.attention_heads)?,
            output: Linear::bind(store, "out", true)?,
            cfg,
            encoder,
            decoder,
        };
        if model.encoder[0].input_dim != model.cfg.source_dim
            || model.output.out_dim != model.cfg.vocab_size
        {
            return Err(Error::format(
                "checkpoint tensors do not match the LAS config",
            ));
        }
        Ok(model)
    }

    /// Additional-encoder output for a whole shared-encoder sequence.
    pub fn additional_encode<O: Ops>(&self, o: &mut O, e_s: &Tensor) -> Result<O::V> {
        if e_s.rows() == 0 {
            return Err(Error::EmptySource);
        }
        if e_s.cols() != self.cfg.source_dim {
            return Err(Error::shape(format!(
                "additional encoder input has {} features, expected {}",
                e_s.cols(),
                self.cfg.source_dim
            )));
        }
        let mut states: Vec<LstmState<O::V>> =
            self.encoder.iter().map(|l| l.zero_state(o, 1)).collect();
        let mut rows = Vec::with_capacity(e_s.rows());
        for t in 0..e_s.rows() {
            let mut h = o.constant(Tensor::row_vector(e_s.row(t).to_vec()));
            for (layer, state) in self.encoder.iter().zip(states.iter_mut()) {
                *state = layer.step(o, state, &h)?;
                h = state.hidden.clone();
            }
            rows.push(h);
        }
        o.concat_rows(&rows)
    }

    /// Keys and values over the whole sequence, as graph values.
    pub fn source<O: Ops>(&self, o: &mut O, e_s: &Tensor) -> Result<(O::V, O::V)> {
        let e_a = self.additional_encode(o, e_s)?;
        self.attention.project_source(o, &e_a)
    }

    pub fn initial_state<O: Ops>(&self, o: &mut O, batch: usize) -> DecoderState<O::V> {
        DecoderState {
            lstm: self
                .decoder
                .iter()
                .map(|l| l.zero_state(o, batch))
                .collect(),
            context: o.constant(Tensor::zeros(vec![batch, self.cfg.attention_dim])),
        }
    }

    /// One teacher-forced step for `B` rows. Row `i` consumes `prev[i]`;
    /// returns the new state and `B x |V|` log-probabilities of the next token.
    pub fn step<O: Ops>(
        &self,
        o: &mut O,
        state: &DecoderState<O::V>,
        prev: &[TokenId],
        keys: &O::V,
        values: &O::V,
    ) -> Result<(DecoderState<O::V>, O::V)> {
        if let Some(&bad) = prev.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::contract(format!(
                "token {bad} outside the vocabulary"
            )));
        }
        let table = o.param(self.embedding);
        let emb = o.gather_rows(&table, prev)?;
        let mut h = o.concat_cols(&[emb, state.context.clone()])?;
        let mut lstm = Vec::with_capacity(self.decoder.len());
        for (layer, s) in self.decoder.iter().zip(&state.lstm) {
            let next = layer.step(o, s, &h)?;
            h = next.hidden.clone();
            lstm.push(next);
        }
        let context = self.attention.attend(o, &h, keys, values)?;
        let joined = o.concat_cols(&[h, context.clone()])?;
        let logits = self.output.forward(o, &joined)?;
        let logp = o.log_softmax(&logits);
        Ok((DecoderState { lstm, context }, logp))
    }

    /// Teacher-forced log-probability of `tokens` followed by end-of-sequence,
    /// recorded on a graph. `weight` scales the picked entries.
    pub fn sequence_score(
        &self,
        g: &mut Graph,
        keys: &Var,
        values: &Var,
        tokens: &[TokenId],
        weight: f64,
    ) -> Result<Var> {
        let mut state = self.initial_state(g, 1);
        let mut prev = Vocab::BLANK_ID;
        let mut rows = Vec::with_capacity(tokens.len() + 1);
        for &target in tokens.iter().chain([&Vocab::EOS_ID]) {
            let (next, logp) = self.step(g, &state, &[prev], keys, values)?;
            rows.push(logp);
            state = next;
            prev = target;
        }
        let all = g.concat_rows(&rows)?;
        let entries = tokens
            .iter()
            .chain([&Vocab::EOS_ID])
            .enumerate()
            .map(|(i, &k)| (i, k, weight))
            .collect();
        g.pick(all, entries)
    }

    /// Streaming builder for the attention cache.
    pub fn cache_builder(&self, store: &ParamStore) -> CacheBuilder {
        let mut o = Eager::new(store);
        CacheBuilder {
            states: self
                .encoder
                .iter()
                .map(|l| l.zero_state(&mut o, 1))
                .collect(),
            keys: Vec::new(),
            values: Vec::new(),
        }
    }
}

/// Appends one additional-encoder frame and its keys and values per
/// shared-encoder frame.
#[derive(Clone, Debug)]
pub struct CacheBuilder {
    states: Vec<LstmState<Arc<Tensor>>>,
    keys: Vec<Arc<Tensor>>,
    values: Vec<Arc<Tensor>>,
}

impl CacheBuilder {
    pub fn push(&mut self, model: &LasModel, store: &ParamStore, e_s_frame: &[f64]) -> Result<()> {
        if e_s_frame.len() != model.cfg.source_dim {
            return Err(Error::shape(
                "shared-encoder frame width differs from the LAS source dim",
            ));
        }
        let mut o = Eager::new(store);
        let mut h = o.constant(Tensor::row_vector(e_s_frame.to_vec()));
        for (layer, state) in model.encoder.iter().zip(self.states.iter_mut()) {
            *state = layer.step(&mut o, state, &h)?;
            h = state.hidden.clone();
        }
        let (k, v) = model.attention.project_source(&mut o, &h)?;
        self.keys.push(k);
        self.values.push(v);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn snapshot(&self, model: &LasModel) -> Result<AttentionSourceCache> {
        let stack = |parts: &[Arc<Tensor>]| -> Result<Tensor> {
            if parts.is_empty() {
                return Ok(Tensor::zeros(vec![0, model.cfg.attention_dim]));
            }
            let refs: Vec<&Tensor> = parts.iter().map(|p| p.as_ref()).collect();
            kernels::concat_rows(&refs)
        };
        Ok(AttentionSourceCache {
            keys: stack(&self.keys)?,
            values: stack(&self.values)?,
        })
    }
}

/// Attention cache built by streaming `e_s` one frame at a time.
pub fn build_attention_cache(
    model: &LasModel,
    store: &ParamStore,
    e_s: &Tensor,
) -> Result<AttentionSourceCache> {
    let mut b = model.cache_builder(store);
    for t in 0..e_s.rows() {
        b.push(model, store, e_s.row(t))?;
    }
    b.snapshot(model)
}
