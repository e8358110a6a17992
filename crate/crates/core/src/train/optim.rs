//! Adam and the stepped learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// `base · factor^⌊epoch / period⌋`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub factor: f64,
    pub period: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: 0.0005,
            factor: 0.9,
            period: 50,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.period.max(1)) as i32;
        self.base * self.factor.powi(steps)
    }
}

/// Learning rate of the default schedule.
pub fn lr_at_epoch(epoch: usize) -> f64 {
    LrSchedule::default().at(epoch)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked before anything is
/// modified, so a rejected step leaves parameters and state untouched.
pub fn adam_step(params: &mut ParamStore, grads: &ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    for (path, p) in params.iter() {
        let g = grads.get(path)?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { path: path.clone() });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (path, p) in params.iter_mut() {
        let g = grads.get(path)?.data();
        let m = state.m.get_mut(path)?.data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
        }
        let v = state.v.get_mut(path)?.data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
        }
        let (m, v) = (state.m.get(path)?.data(), state.v.get(path)?.data());
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            *pi -= lr * (mi / c1) / ((vi / c2).sqrt() + EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![v]));
        s
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_at_epoch(0), 0.0005);
        assert_eq!(lr_at_epoch(49), 0.0005);
        assert!((lr_at_epoch(50) - 0.00045).abs() < 1e-15);
        assert!((lr_at_epoch(100) - 0.000405).abs() < 1e-15);
        assert!((1..500).all(|e| lr_at_epoch(e) <= lr_at_epoch(e - 1)));
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = store(2.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &store(1.0), &mut st, 0.001).unwrap();
        let expected = 2.0 - 0.001 * 1.0 / (1.0 + EPS);
        assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = store(3.0);
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &store(0.0), &mut st, 0.1).unwrap();
        }
        assert_eq!(p, store(3.0));
        assert_eq!(st.t, 5);
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut p = store(1.0);
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &store(f64::NAN), &mut st, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref path } if path == "w"));
        assert_eq!(st.t, 0);
        assert_eq!(p, store(1.0));
    }
}
