use rand::Rng;

use super::ops::Ops;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Affine map `x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.init_uniform(format!("{name}.w"), vec![in_dim, out_dim], in_dim, rng)?;
        let bias = if bias {
            Some(store.init_uniform(format!("{name}.b"), vec![1, out_dim], in_dim, rng)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn bind(store: &ParamStore, name: &str, bias: bool) -> Result<Self> {
        let weight = lookup(store, &format!("{name}.w"))?;
        let shape = store.get(weight).shape().to_vec();
        let bias = if bias {
            Some(lookup(store, &format!("{name}.b"))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim: shape[0],
            out_dim: shape[1],
        })
    }

    pub fn forward<O: Ops>(&self, o: &mut O, x: &O::V) -> Result<O::V> {
        let w = o.param(self.weight);
        let y = o.matmul(x, &w)?;
        match self.bias {
            Some(b) => {
                let b = o.param(b);
                o.add(&y, &b)
            }
            None => Ok(y),
        }
    }
}

pub const FORGET_BIAS_INIT: f64 = 1.0;

pub(crate) fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::format(format!("missing parameter {name}")))
}

#[derive(Clone, Debug)]
pub struct LstmState<V> {
    pub cell: V,
    pub hidden: V,
}

/// Per-layer states after a stack step, plus the top layer's output.
pub type StackStep<V> = (Vec<LstmState<V>>, V);

/// Unidirectional LSTM cell with an output projection.
///
/// Gate pre-activations are `x W_x + h W_h + b`, split as input, forget,
/// candidate and output blocks of `hidden_dim` each. The recurrent and
/// emitted state is the projection `(o * tanh(c)) W_p`.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    pub w_proj: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub projection_dim: usize,
}

impl LstmLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        projection_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if projection_dim > hidden_dim {
            return Err(Error::config(format!(
                "{name}: projection {projection_dim} exceeds hidden {hidden_dim}"
            )));
        }
        let fan_in = input_dim + projection_dim;
        let w_x = store.init_uniform(
            format!("{name}.w_x"),
            vec![input_dim, 4 * hidden_dim],
            fan_in,
            rng,
        )?;
        let w_h = store.init_uniform(
            format!("{name}.w_h"),
            vec![projection_dim, 4 * hidden_dim],
            fan_in,
            rng,
        )?;
        let bias = store.init_uniform(format!("{name}.b"), vec![1, 4 * hidden_dim], fan_in, rng)?;
        // Forget gate starts mostly open so state survives long silences.
        store.tensor_mut(bias).data_mut()[hidden_dim..2 * hidden_dim].fill(FORGET_BIAS_INIT);
        let w_proj = store.init_uniform(
            format!("{name}.w_p"),
            vec![hidden_dim, projection_dim],
            hidden_dim,
            rng,
        )?;
        Ok(LstmLayer {
            w_x,
            w_h,
            bias,
            w_proj,
            input_dim,
            hidden_dim,
            projection_dim,
        })
    }

    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        let w_x = lookup(store, &format!("{name}.w_x"))?;
        let w_h = lookup(store, &format!("{name}.w_h"))?;
        let bias = lookup(store, &format!("{name}.b"))?;
        let w_proj = lookup(store, &format!("{name}.w_p"))?;
        let input_dim = store.get(w_x).shape()[0];
        let hidden_dim = store.get(w_proj).shape()[0];
        let projection_dim = store.get(w_proj).shape()[1];
        Ok(LstmLayer {
            w_x,
            w_h,
            bias,
            w_proj,
            input_dim,
            hidden_dim,
            projection_dim,
        })
    }

    pub fn zero_state<O: Ops>(&self, o: &mut O, batch: usize) -> LstmState<O::V> {
        LstmState {
            cell: o.constant(Tensor::zeros(vec![batch, self.hidden_dim])),
            hidden: o.constant(Tensor::zeros(vec![batch, self.projection_dim])),
        }
    }

    /// One time step for a batch of rows. Returns the new state; its
    /// `hidden` field is the layer output.
    pub fn step<O: Ops>(
        &self,
        o: &mut O,
        state: &LstmState<O::V>,
        x: &O::V,
    ) -> Result<LstmState<O::V>> {
        let xv = o.value(x);
        if xv.cols() != self.input_dim {
            return Err(Error::shape(format!(
                "lstm input has {} features, expected {}",
                xv.cols(),
                self.input_dim
            )));
        }
        let hv = o.value(&state.hidden);
        let cv = o.value(&state.cell);
        if hv.cols() != self.projection_dim
            || cv.cols() != self.hidden_dim
            || hv.rows() != xv.rows()
        {
            return Err(Error::shape("lstm state does not match layer dimensions"));
        }
        let h = self.hidden_dim;
        let w_x = o.param(self.w_x);
        let w_h = o.param(self.w_h);
        let b = o.param(self.bias);
        let gx = o.matmul(x, &w_x)?;
        let gh = o.matmul(&state.hidden, &w_h)?;
        let gates = o.add(&gx, &gh)?;
        let gates = o.add(&gates, &b)?;
        let i = o.slice_cols(&gates, 0, h)?;
        let f = o.slice_cols(&gates, h, h)?;
        let g = o.slice_cols(&gates, 2 * h, h)?;
        let og = o.slice_cols(&gates, 3 * h, h)?;
        let i = o.sigmoid(&i);
        let f = o.sigmoid(&f);
        let g = o.tanh(&g);
        let og = o.sigmoid(&og);
        let keep = o.mul(&f, &state.cell)?;
        let write = o.mul(&i, &g)?;
        let cell = o.add(&keep, &write)?;
        let squashed = o.tanh(&cell);
        let m = o.mul(&og, &squashed)?;
        let w_p = o.param(self.w_proj);
        let hidden = o.matmul(&m, &w_p)?;
        Ok(LstmState { cell, hidden })
    }
}

/// A stack of LSTM layers stepped together.
#[derive(Clone, Debug)]
pub struct LstmStack {
    pub layers: Vec<LstmLayer>,
}

impl LstmStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        num_layers: usize,
        hidden_dim: usize,
        projection_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(num_layers);
        let mut dim = input_dim;
        for l in 0..num_layers {
            layers.push(LstmLayer::new(
                store,
                &format!("{name}.{l}"),
                dim,
                hidden_dim,
                projection_dim,
                rng,
            )?);
            dim = projection_dim;
        }
        Ok(LstmStack { layers })
    }

    pub fn bind(store: &ParamStore, name: &str, num_layers: usize) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|l| LstmLayer::bind(store, &format!("{name}.{l}")))
            .collect::<Result<_>>()?;
        Ok(LstmStack { layers })
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.last().map(|l| l.projection_dim)
    }

    pub fn zero_state<O: Ops>(&self, o: &mut O, batch: usize) -> Vec<LstmState<O::V>> {
        self.layers.iter().map(|l| l.zero_state(o, batch)).collect()
    }

    pub fn step<O: Ops>(
        &self,
        o: &mut O,
        states: &[LstmState<O::V>],
        x: &O::V,
    ) -> Result<StackStep<O::V>> {
        let mut next = Vec::with_capacity(self.layers.len());
        let mut input = x.clone();
        for (layer, state) in self.layers.iter().zip(states) {
            let s = layer.step(o, state, &input)?;
            input = s.hidden.clone();
            next.push(s);
        }
        Ok((next, input))
    }
}

/// Free-function form of a single LSTM step.
pub fn lstm_step<O: Ops>(
    o: &mut O,
    state: &LstmState<O::V>,
    input: &O::V,
    params: &LstmLayer,
) -> Result<(LstmState<O::V>, O::V)> {
    let next = params.step(o, state, input)?;
    let out = next.hidden.clone();
    Ok((next, out))
}

/// Multi-head scaled dot-product attention with learned projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub num_heads: usize,
    pub model_dim: usize,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        source_dim: usize,
        model_dim: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_heads == 0 || !model_dim.is_multiple_of(num_heads) {
            return Err(Error::config(format!(
                "{name}: model dim {model_dim} not divisible into {num_heads} heads"
            )));
        }
        let query = store.init_uniform(
            format!("{name}.w_q"),
            vec![query_dim, model_dim],
            query_dim,
            rng,
        )?;
        let key = store.init_uniform(
            format!("{name}.w_k"),
            vec![source_dim, model_dim],
            source_dim,
            rng,
        )?;
        let value = store.init_uniform(
            format!("{name}.w_v"),
            vec![source_dim, model_dim],
            source_dim,
            rng,
        )?;
        let output = store.init_uniform(
            format!("{name}.w_o"),
            vec![model_dim, model_dim],
            model_dim,
            rng,
        )?;
        Ok(MultiHeadAttention {
            num_heads,
            model_dim,
            query,
            key,
            value,
            output,
        })
    }

    pub fn bind(store: &ParamStore, name: &str, num_heads: usize) -> Result<Self> {
        let query = lookup(store, &format!("{name}.w_q"))?;
        let key = lookup(store, &format!("{name}.w_k"))?;
        let value = lookup(store, &format!("{name}.w_v"))?;
        let output = lookup(store, &format!("{name}.w_o"))?;
        let model_dim = store.get(output).shape()[0];
        if num_heads == 0 || !model_dim.is_multiple_of(num_heads) {
            return Err(Error::config("attention heads do not divide model dim"));
        }
        Ok(MultiHeadAttention {
            num_heads,
            model_dim,
            query,
            key,
            value,
            output,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Key and value projections of source rows (`S x source_dim` each way).
    pub fn project_source<O: Ops>(&self, o: &mut O, source: &O::V) -> Result<(O::V, O::V)> {
        let wk = o.param(self.key);
        let wv = o.param(self.value);
        Ok((o.matmul(source, &wk)?, o.matmul(source, &wv)?))
    }

    /// Attention of a batch of queries (`B x query_dim`) over already
    /// projected keys and values (`S x model_dim`).
    pub fn attend<O: Ops>(
        &self,
        o: &mut O,
        query: &O::V,
        keys: &O::V,
        values: &O::V,
    ) -> Result<O::V> {
        let s = o.value(keys).rows();
        if s == 0 || o.value(values).rows() == 0 {
            return Err(Error::EmptySource);
        }
        if o.value(values).rows() != s {
            return Err(Error::shape("keys and values differ in source length"));
        }
        let wq = o.param(self.query);
        let q = o.matmul(query, &wq)?;
        let dk = self.head_dim();
        let inv = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let qh = o.slice_cols(&q, h * dk, dk)?;
            let kh = o.slice_cols(keys, h * dk, dk)?;
            let vh = o.slice_cols(values, h * dk, dk)?;
            let kt = o.transpose(&kh);
            let scores = o.matmul(&qh, &kt)?;
            let scores = o.scale(&scores, inv);
            let weights = o.softmax(&scores);
            heads.push(o.matmul(&weights, &vh)?);
        }
        let ctx = o.concat_cols(&heads)?;
        let wo = o.param(self.output);
        o.matmul(&ctx, &wo)
    }

    pub fn forward<O: Ops>(
        &self,
        o: &mut O,
        query: &O::V,
        keys: &O::V,
        values: &O::V,
    ) -> Result<O::V> {
        if o.value(keys).rows() == 0 || o.value(values).rows() == 0 {
            return Err(Error::EmptySource);
        }
        let wk = o.param(self.key);
        let wv = o.param(self.value);
        let k = o.matmul(keys, &wk)?;
        let v = o.matmul(values, &wv)?;
        self.attend(o, query, &k, &v)
    }
}

/// Free-function form of multi-head attention over raw keys and values.
pub fn multi_head_attention<O: Ops>(
    o: &mut O,
    query: &O::V,
    keys: &O::V,
    values: &O::V,
    params: &MultiHeadAttention,
) -> Result<O::V> {
    params.forward(o, query, keys, values)
}
