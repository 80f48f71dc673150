use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates sampled per parameter tensor; `None` checks all of them.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            max_coords_per_param: Some(16),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coords_checked: usize,
    pub worst_param: Option<String>,
}

/// Compares reverse-mode gradients of `loss_fn` with central differences.
///
/// The error for one coordinate is `|analytic - numeric| / max(1, |analytic|)`.
/// `loss_fn` must be deterministic; nondeterminism is not detected.
pub fn gradient_check<F>(
    store: &ParamStore,
    loss_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let loss = loss_fn(&mut g)?;
        Ok(g.scalar(loss))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        coords_checked: 0,
        worst_param: None,
    };
    for id in store.ids() {
        let n = store.get(id).numel();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let original = store.get(id).data()[c];
            probe.tensor_mut(id).data_mut()[c] = original + opts.epsilon;
            let up = eval(&probe)?;
            probe.tensor_mut(id).data_mut()[c] = original - opts.epsilon;
            let down = eval(&probe)?;
            probe.tensor_mut(id).data_mut()[c] = original;
            let numeric = (up - down) / (2.0 * opts.epsilon);
            let exact = analytic.get(id).map_or(0.0, |g| g.data()[c]);
            let err = (exact - numeric).abs() / exact.abs().max(1.0);
            report.coords_checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_param = Some(store.name(id).to_string());
            }
        }
    }
    Ok(report)
}
