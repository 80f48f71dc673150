use crate::error::{Error, Result};
use crate::nncore::{log_add_exp, Tensor};
use crate::vocab::{TokenId, Vocab};

/// Joint-network log-probabilities over the `(U+1) x T` alignment grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnTLogProbLattice {
    frames: usize,
    labels: usize,
    symbols: usize,
    data: Vec<f64>,
}

impl RnnTLogProbLattice {
    /// Wraps a `(U+1)·T x |V|` matrix whose row `u·T + t` is cell `(u, t)`.
    pub fn from_grid(frames: usize, labels: usize, grid: Tensor) -> Result<Self> {
        if grid.rows() != (labels + 1) * frames {
            return Err(Error::shape(format!(
                "grid has {} rows, expected ({labels}+1)*{frames}",
                grid.rows()
            )));
        }
        let symbols = grid.cols();
        Ok(RnnTLogProbLattice {
            frames,
            labels,
            symbols,
            data: grid.into_data(),
        })
    }

    /// Grid filled from `f(u, t)`, which returns one row of log-probs.
    pub fn from_fn(
        frames: usize,
        labels: usize,
        symbols: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Self {
        let mut data = Vec::with_capacity((labels + 1) * frames * symbols);
        for u in 0..=labels {
            for t in 0..frames {
                let row = f(u, t);
                assert_eq!(row.len(), symbols, "row width");
                data.extend(row);
            }
        }
        RnnTLogProbLattice {
            frames,
            labels,
            symbols,
            data,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    fn index(&self, u: usize, t: usize) -> usize {
        (u * self.frames + t) * self.symbols
    }

    pub fn row(&self, u: usize, t: usize) -> &[f64] {
        let i = self.index(u, t);
        &self.data[i..i + self.symbols]
    }

    pub fn get(&self, u: usize, t: usize, k: TokenId) -> f64 {
        self.data[self.index(u, t) + k]
    }

    pub fn set(&mut self, u: usize, t: usize, k: TokenId, v: f64) {
        let i = self.index(u, t) + k;
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        let rows = (self.labels + 1) * self.frames;
        Tensor::matrix(rows, self.symbols, self.data).expect("grid dimensions are consistent")
    }
}

/// Negative log-likelihood and its gradient with respect to every grid entry.
#[derive(Clone, Debug)]
pub struct RnnTLoss {
    pub loss: f64,
    pub grad: RnnTLogProbLattice,
}

/// Transducer loss by forward-backward in log space.
///
/// Blank at `(u, t)` moves to `(u, t+1)`; label `y_{u+1}` at `(u, t)` moves to
/// `(u+1, t)`; the path ends with the blank emitted at `(U, T-1)`.
pub fn rnnt_loss(lattice: &RnnTLogProbLattice, labels: &[TokenId]) -> Result<RnnTLoss> {
    let (t_len, u_len) = (lattice.frames, lattice.labels);
    if labels.len() != u_len {
        return Err(Error::shape(format!(
            "lattice built for {u_len} labels, got {}",
            labels.len()
        )));
    }
    if t_len == 0 {
        return Err(Error::InfeasibleAlignment("no frames".into()));
    }
    if let Some(&bad) = labels
        .iter()
        .find(|&&y| y >= lattice.symbols || y == Vocab::BLANK_ID)
    {
        return Err(Error::contract(format!(
            "label {bad} is blank or outside the vocabulary"
        )));
    }
    let blank = Vocab::BLANK_ID;
    let w = t_len;
    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; (u_len + 1) * w];
    let mut beta = vec![neg; (u_len + 1) * w];
    for u in 0..=u_len {
        for t in 0..t_len {
            let a = if u == 0 && t == 0 {
                0.0
            } else {
                let from_blank = if t > 0 {
                    alpha[u * w + t - 1] + lattice.get(u, t - 1, blank)
                } else {
                    neg
                };
                let from_label = if u > 0 {
                    alpha[(u - 1) * w + t] + lattice.get(u - 1, t, labels[u - 1])
                } else {
                    neg
                };
                log_add_exp(from_blank, from_label)
            };
            alpha[u * w + t] = a;
        }
    }
    for u in (0..=u_len).rev() {
        for t in (0..t_len).rev() {
            let b = if u == u_len && t == t_len - 1 {
                lattice.get(u, t, blank)
            } else {
                let via_blank = if t + 1 < t_len {
                    beta[u * w + t + 1] + lattice.get(u, t, blank)
                } else {
                    neg
                };
                let via_label = if u < u_len {
                    beta[(u + 1) * w + t] + lattice.get(u, t, labels[u])
                } else {
                    neg
                };
                log_add_exp(via_blank, via_label)
            };
            beta[u * w + t] = b;
        }
    }
    let log_p = beta[0];
    if !log_p.is_finite() {
        return Err(Error::InfeasibleAlignment(format!(
            "no path with finite probability through a {}x{t_len} grid",
            u_len + 1
        )));
    }
    let mut grad = RnnTLogProbLattice {
        frames: t_len,
        labels: u_len,
        symbols: lattice.symbols,
        data: vec![0.0; lattice.data.len()],
    };
    for u in 0..=u_len {
        for t in 0..t_len {
            let a = alpha[u * w + t];
            let after_blank = if u == u_len && t == t_len - 1 {
                0.0
            } else if t + 1 < t_len {
                beta[u * w + t + 1]
            } else {
                neg
            };
            let gb = -(a + lattice.get(u, t, blank) + after_blank - log_p).exp();
            grad.set(u, t, blank, gb);
            if u < u_len {
                let y = labels[u];
                let gl = -(a + lattice.get(u, t, y) + beta[(u + 1) * w + t] - log_p).exp();
                grad.set(u, t, y, gl);
            }
        }
    }
    Ok(RnnTLoss { loss: -log_p, grad })
}
