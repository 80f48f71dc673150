use crate::error::{Error, Result};
use crate::nncore::ParamStore;

/// Shadow average of the parameters, used for evaluation.
#[derive(Clone, Debug)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: ParamStore,
    /// Ramp the decay up over the first updates.
    pub warmup: bool,
    pub updates: u64,
}

impl EmaState {
    pub fn new(params: &ParamStore, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::config("EMA decay must be in [0, 1]"));
        }
        Ok(EmaState {
            decay,
            shadow: params.clone(),
            warmup: false,
            updates: 0,
        })
    }

    pub fn with_warmup(mut self, warmup: bool) -> Self {
        self.warmup = warmup;
        self
    }

    pub fn effective_decay(&self) -> f64 {
        if self.warmup {
            let n = self.updates as f64;
            self.decay.min((1.0 + n) / (10.0 + n))
        } else {
            self.decay
        }
    }
}

/// `shadow <- decay * shadow + (1 - decay) * params`, elementwise.
pub fn ema_update(mut ema: EmaState, params: &ParamStore) -> Result<EmaState> {
    if ema.shadow.len() != params.len() {
        return Err(Error::shape(
            "EMA shadow and parameters differ in tensor count",
        ));
    }
    let d = ema.effective_decay();
    for (id, name, p) in params.iter() {
        if ema.shadow.name(id) != name || !ema.shadow.get(id).same_shape(p) {
            return Err(Error::shape(format!("EMA shadow of {name} does not match")));
        }
        let s = ema.shadow.tensor_mut(id);
        for (sv, pv) in s.data_mut().iter_mut().zip(p.data()) {
            *sv = d * *sv + (1.0 - d) * pv;
        }
    }
    ema.updates += 1;
    Ok(ema)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::nncore::Tensor;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(vec![2, 2], v)).unwrap();
        s
    }

    fn first(s: &ParamStore) -> f64 {
        s.iter().next().unwrap().2.data()[0]
    }

    #[test]
    fn decay_zero_copies_params() {
        let e = ema_update(EmaState::new(&store(0.0), 0.0).unwrap(), &store(3.0)).unwrap();
        assert!(e.shadow.bit_eq(&store(3.0)));
    }

    #[test]
    fn decay_one_keeps_shadow() {
        let e = ema_update(EmaState::new(&store(0.5), 1.0).unwrap(), &store(3.0)).unwrap();
        assert!(e.shadow.bit_eq(&store(0.5)));
    }

    #[test]
    fn two_updates_closed_form() {
        let mut e = EmaState::new(&store(0.0), 0.9).unwrap();
        for _ in 0..2 {
            e = ema_update(e, &store(1.0)).unwrap();
        }
        assert!((first(&e.shadow) - 0.19).abs() < 1e-15);
    }

    #[test]
    fn warmup_ramps_decay() {
        let e = EmaState::new(&store(0.0), 0.999).unwrap().with_warmup(true);
        assert!((e.effective_decay() - 0.1).abs() < 1e-15);
        let e = ema_update(e, &store(1.0)).unwrap();
        assert!((first(&e.shadow) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut other = ParamStore::new();
        other.insert("w", Tensor::zeros(vec![3])).unwrap();
        assert!(matches!(
            ema_update(EmaState::new(&store(0.0), 0.5).unwrap(), &other),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn shadow_stays_within_history(
            history in proptest::collection::vec(-10.0f64..10.0, 1..30),
            decay in 0.01f64..0.99,
        ) {
            let mut e = EmaState::new(&store(history[0]), decay).unwrap();
            for &v in &history[1..] {
                e = ema_update(e, &store(v)).unwrap();
            }
            let lo = history.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s = first(&e.shadow);
            prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
        }
    }
}
