use std::collections::HashMap;
use std::sync::Arc;

use super::ops::{kernels, Ops};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    LogSoftmax(Var),
    Softmax(Var),
    OuterSum(Var, Var),
    Sum(Var),
    Pick(Var, Vec<(usize, usize, f64)>),
    /// Scalar-valued op whose local derivatives were computed during the forward pass.
    Custom(Vec<(Var, Tensor)>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// Recording of a forward computation for reverse-mode differentiation.
///
/// Parameters enter through [`Ops::param`]; each parameter maps to a single
/// leaf per graph so gradients from repeated uses accumulate in one place.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.push_shared(Arc::new(value), op)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Sum of all elements, as a `1 x 1` value.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Weighted sum of selected `(row, col)` entries, as a `1 x 1` value.
    pub fn pick(&mut self, a: Var, entries: Vec<(usize, usize, f64)>) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let mut s = 0.0;
        for &(r, c, w) in &entries {
            if r >= t.rows() || c >= t.cols() {
                return Err(Error::shape(format!(
                    "pick ({r},{c}) of {}x{}",
                    t.rows(),
                    t.cols()
                )));
            }
            s += w * t.get(r, c);
        }
        Ok(self.push(Tensor::scalar(s), Op::Pick(a, entries)))
    }

    /// Records a scalar function of `inputs` given its value and the
    /// derivative of that value with respect to each input.
    pub fn custom_scalar(&mut self, value: f64, inputs: Vec<(Var, Tensor)>) -> Result<Var> {
        for (v, g) in &inputs {
            if !self.nodes[v.0].value.same_shape(g) {
                return Err(Error::shape(
                    "custom op gradient shape differs from its input",
                ));
            }
        }
        Ok(self.push(Tensor::scalar(value), Op::Custom(inputs)))
    }

    /// Reverse pass from a `1 x 1` loss. Returns gradients for every
    /// parameter that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward called before any forward computation".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::State("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::empty(self.store.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let mut ga = vec![0.0; m * k];
                    tensor::matmul_a_bt_acc(g.data(), bv.data(), &mut ga, m, n, k);
                    accumulate(&mut grads, *a, Tensor::matrix(m, k, ga)?);
                    let mut gb = vec![0.0; k * n];
                    tensor::matmul_at_b_acc(av.data(), g.data(), &mut gb, m, k, n);
                    accumulate(&mut grads, *b, Tensor::matrix(k, n, gb)?);
                }
                Op::Add(a, b) => {
                    let bv = &self.nodes[b.0].value;
                    if bv.rows() == g.rows() {
                        accumulate(&mut grads, *b, g.clone());
                    } else {
                        let n = g.cols();
                        let mut gb = vec![0.0; n];
                        for r in 0..g.rows() {
                            for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, *b, Tensor::matrix(1, n, gb)?);
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    accumulate(&mut grads, *a, kernels::mul(&g, &bv)?);
                    accumulate(&mut grads, *b, kernels::mul(&g, &av)?);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.map(|v| v * f)),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let d = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * yv * (1.0 - yv));
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor::matrix(g.rows(), g.cols(), d.collect())?,
                    );
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let d = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * (1.0 - yv * yv));
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor::matrix(g.rows(), g.cols(), d.collect())?,
                    );
                }
                Op::SliceCols(a, start) => {
                    let av = &self.nodes[a.0].value;
                    let (m, n, w) = (av.rows(), av.cols(), g.cols());
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        ga[r * n + start..r * n + start + w].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(m, n, ga)?);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.cols();
                        accumulate(&mut grads, *p, kernels::slice_cols(&g, start, w)?);
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let n = g.cols();
                    let mut start = 0;
                    for p in parts {
                        let m = self.nodes[p.0].value.rows();
                        let data = g.data()[start * n..(start + m) * n].to_vec();
                        accumulate(&mut grads, *p, Tensor::matrix(m, n, data)?);
                        start += m;
                    }
                }
                Op::GatherRows(a, rows) => {
                    let av = &self.nodes[a.0].value;
                    let n = av.cols();
                    let mut ga = vec![0.0; av.rows() * n];
                    for (i, &r) in rows.iter().enumerate() {
                        for (acc, v) in ga[r * n..(r + 1) * n].iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(av.rows(), n, ga)?);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, kernels::transpose(&g)),
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let n = y.cols();
                    let mut ga = vec![0.0; y.numel()];
                    for r in 0..y.rows() {
                        let gsum: f64 = g.row(r).iter().sum();
                        for c in 0..n {
                            ga[r * n + c] = g.get(r, c) - y.get(r, c).exp() * gsum;
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(y.rows(), n, ga)?);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let n = y.cols();
                    let mut ga = vec![0.0; y.numel()];
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            ga[r * n + c] = y.get(r, c) * (g.get(r, c) - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(y.rows(), n, ga)?);
                }
                Op::OuterSum(a, b) => {
                    let t_len = self.nodes[a.0].value.rows();
                    let u_len = self.nodes[b.0].value.rows();
                    let n = g.cols();
                    let mut ga = vec![0.0; t_len * n];
                    let mut gb = vec![0.0; u_len * n];
                    for u in 0..u_len {
                        for t in 0..t_len {
                            let row = g.row(u * t_len + t);
                            for c in 0..n {
                                ga[t * n + c] += row[c];
                                gb[u * n + c] += row[c];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::matrix(t_len, n, ga)?);
                    accumulate(&mut grads, *b, Tensor::matrix(u_len, n, gb)?);
                }
                Op::Sum(a) => {
                    let av = &self.nodes[a.0].value;
                    let s = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(vec![av.rows(), av.cols()], s));
                }
                Op::Pick(a, entries) => {
                    let av = &self.nodes[a.0].value;
                    let s = g.data()[0];
                    let mut ga = Tensor::zeros(vec![av.rows(), av.cols()]);
                    let n = av.cols();
                    for &(r, c, w) in entries {
                        ga.data_mut()[r * n + c] += s * w;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Custom(inputs) => {
                    let s = g.data()[0];
                    for (v, local) in inputs {
                        accumulate(&mut grads, *v, local.map(|x| x * s));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl Ops for Graph<'_> {
    type V = Var;

    fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push_shared(self.store.shared(id), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    fn value<'b>(&'b self, v: &'b Var) -> &'b Tensor {
        &self.nodes[v.0].value
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = tensor::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(out, Op::MatMul(*a, *b)))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::add(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(out, Op::Add(*a, *b)))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::mul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(out, Op::Mul(*a, *b)))
    }

    fn scale(&mut self, a: &Var, factor: f64) -> Var {
        let out = self.nodes[a.0].value.map(|v| v * factor);
        self.push(out, Op::Scale(*a, factor))
    }

    fn sigmoid(&mut self, a: &Var) -> Var {
        let out = self.nodes[a.0].value.map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(*a))
    }

    fn tanh(&mut self, a: &Var) -> Var {
        let out = self.nodes[a.0].value.map(f64::tanh);
        self.push(out, Op::Tanh(*a))
    }

    fn slice_cols(&mut self, a: &Var, start: usize, width: usize) -> Result<Var> {
        let out = kernels::slice_cols(&self.nodes[a.0].value, start, width)?;
        Ok(self.push(out, Op::SliceCols(*a, start)))
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts
            .iter()
            .map(|p| self.nodes[p.0].value.as_ref())
            .collect();
        let out = kernels::concat_cols(&refs)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts
            .iter()
            .map(|p| self.nodes[p.0].value.as_ref())
            .collect();
        let out = kernels::concat_rows(&refs)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    fn gather_rows(&mut self, a: &Var, rows: &[usize]) -> Result<Var> {
        let out = kernels::gather_rows(&self.nodes[a.0].value, rows)?;
        Ok(self.push(out, Op::GatherRows(*a, rows.to_vec())))
    }

    fn transpose(&mut self, a: &Var) -> Var {
        let out = kernels::transpose(&self.nodes[a.0].value);
        self.push(out, Op::Transpose(*a))
    }

    fn log_softmax(&mut self, a: &Var) -> Var {
        let out = kernels::log_softmax_rows(&self.nodes[a.0].value);
        self.push(out, Op::LogSoftmax(*a))
    }

    fn softmax(&mut self, a: &Var) -> Var {
        let out = kernels::softmax_rows(&self.nodes[a.0].value);
        self.push(out, Op::Softmax(*a))
    }

    fn outer_sum(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::outer_sum(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(out, Op::OuterSum(*a, *b)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f64>) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::row_vector(values)).unwrap();
        (store, id)
    }

    #[test]
    fn sum_of_parameter_has_unit_gradient() {
        let (store, id) = store_with(vec![0.3, -1.0, 2.0]);
        let mut g = Graph::new(&store);
        let w = g.param(id);
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(id).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_scaled_loss_gives_zero_gradient() {
        let (store, id) = store_with(vec![0.3, -1.0, 2.0]);
        let mut g = Graph::new(&store);
        let w = g.param(id);
        let t = g.tanh(&w);
        let z = g.scale(&t, 0.0);
        let loss = g.sum(z);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(id).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let (store, _) = store_with(vec![1.0]);
        let mut other_store = ParamStore::new();
        other_store.insert("x", Tensor::scalar(1.0)).unwrap();
        let mut donor = Graph::new(&other_store);
        let x = donor.param(ParamId(0));
        let loss = donor.sum(x);
        let empty = Graph::new(&store);
        assert!(matches!(empty.backward(loss), Err(Error::State(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let (store, id) = store_with(vec![1.0, 2.0]);
        let mut g = Graph::new(&store);
        let w = g.param(id);
        assert!(matches!(g.backward(w), Err(Error::State(_))));
    }

    #[test]
    fn repeated_param_use_accumulates() {
        let (store, id) = store_with(vec![2.0]);
        let mut g = Graph::new(&store);
        let a = g.param(id);
        let b = g.param(id);
        let p = g.mul(&a, &b).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(id).unwrap().data(), &[4.0]);
    }
}
