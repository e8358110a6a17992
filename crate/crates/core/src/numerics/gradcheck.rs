//! Central finite-difference verification of tape gradients.

use rayon::prelude::*;

use super::tape::{OpKind, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor of the relative error, so coordinates with
    /// near-zero gradient are judged on absolute error.
    pub abs_floor: f64,
    /// Check at most this many evenly spaced coordinates per input.
    pub max_coords: Option<usize>,
    #[doc(hidden)]
    pub fault: Option<OpKind>,
}

impl GradCheckOptions {
    pub fn new(step: f64, tol: f64) -> Self {
        GradCheckOptions {
            step,
            tol,
            abs_floor: 1e-4,
            max_coords: None,
            fault: None,
        }
    }

    pub fn max_coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
    pub failures: Vec<Mismatch>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.max_rel_err < self.tol
    }
}

/// Compares tape gradients of the scalar function `f` against
/// `(f(x+h) − f(x−h)) / 2h` for every checked coordinate of every input.
pub fn grad_check<F>(inputs: &[Tensor], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    let mut tape = Tape::new();
    if let Some(kind) = opts.fault {
        tape.inject_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<&Tensor> = vars
        .iter()
        .map(|&v| grads.get(v).expect("leaf gradient"))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vs)?;
        let v = t.value(out);
        if v.numel() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut coords = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        let n = x.numel();
        let take = opts.max_coords.unwrap_or(n).min(n);
        for c in 0..take {
            coords.push((i, c * n / take.max(1)));
        }
    }

    let results: Vec<Result<Mismatch>> = coords
        .par_iter()
        .map(|&(i, j)| {
            let mut xs = inputs.to_vec();
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + opts.step;
            let fp = eval(&xs)?;
            xs[i].data_mut()[j] = x0 - opts.step;
            let fm = eval(&xs)?;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic[i].data()[j];
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            Ok(Mismatch {
                input: i,
                index: j,
                analytic: a,
                numeric,
                rel_err: (a - numeric).abs() / denom,
            })
        })
        .collect();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        failures: Vec::new(),
        tol: opts.tol,
    };
    for r in results {
        let m = r?;
        report.checked += 1;
        if !(m.rel_err < opts.tol) {
            report.failures.push(m.clone());
        }
        if !(m.rel_err <= report.max_rel_err) {
            report.max_rel_err = m.rel_err;
            report.worst = Some(m);
        }
    }
    Ok(report)
}
