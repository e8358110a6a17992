//! Diagonal state-space kernels.
//!
//! Every channel `h` runs an independent linear system with a diagonal state
//! matrix of size `N`:
//!
//! ```text
//! h_t = Ā ⊙ h_{t−1} + B̄ x_t
//! y_t = C · h_t + D x_t
//! ```
//!
//! The same system is evaluated three ways (direct recurrence, materialised
//! convolution kernel, associative scan) and, for training, on the tape. The
//! selective variant makes `Δ`, `B`, `C` functions of the current input.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{kernels, scan, Tape, Tensor, Var};
use crate::params::{Graph, Init};

/// Continuous-time diagonal SSM, parameters laid out `[H × N]` (`D` is `[H]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousSsm {
    a: Tensor,
    b: Tensor,
    c: Tensor,
    d: Tensor,
}

impl ContinuousSsm {
    pub fn new(a: Tensor, b: Tensor, c: Tensor, d: Tensor) -> Result<Self> {
        let s = a.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(Error::invalid("ssm", format!("A must be [H × N] with H, N ≥ 1, got {s:?}")));
        }
        for t in [&b, &c] {
            if t.shape() != s {
                return Err(Error::shape("ssm", s, t.shape()));
            }
        }
        if d.shape() != [s[0]] {
            return Err(Error::shape("ssm", &[s[0]], d.shape()));
        }
        if let Some(v) = a.data().iter().find(|v| !(**v < 0.0)) {
            return Err(Error::invalid("ssm", format!("A entries must be < 0, found {v}")));
        }
        Ok(ContinuousSsm { a, b, c, d })
    }

    pub fn channels(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn state_size(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }
}

/// Discretised diagonal SSM.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: Tensor,
    pub b_bar: Tensor,
    pub c: Tensor,
    pub d: Tensor,
    /// Step size per channel.
    pub delta: Vec<f64>,
}

impl DiscreteSsm {
    /// Builds a discrete system directly; used for synthetic and boundary cases.
    pub fn new(a_bar: Tensor, b_bar: Tensor, c: Tensor, d: Tensor) -> Result<Self> {
        let s = a_bar.shape().to_vec();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(Error::invalid("ssm", format!("Ā must be [H × N], got {s:?}")));
        }
        for t in [&b_bar, &c] {
            if t.shape() != s.as_slice() {
                return Err(Error::shape("ssm", &s, t.shape()));
            }
        }
        if d.shape() != [s[0]] {
            return Err(Error::shape("ssm", &[s[0]], d.shape()));
        }
        Ok(DiscreteSsm {
            a_bar,
            b_bar,
            c,
            d,
            delta: vec![1.0; s[0]],
        })
    }

    pub fn channels(&self) -> usize {
        self.a_bar.shape()[0]
    }

    pub fn state_size(&self) -> usize {
        self.a_bar.shape()[1]
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.channels() {
            return Err(Error::shape("ssm", &[s.first().copied().unwrap_or(0), self.channels()], s));
        }
        Ok((s[0], s[1]))
    }
}

/// Zero-order-hold discretisation with one step size for every channel.
pub fn zoh_discretize(ssm: &ContinuousSsm, delta: f64) -> Result<DiscreteSsm> {
    zoh_discretize_per_channel(ssm, &vec![delta; ssm.channels()])
}

/// `Ā = exp(Δa)`, `B̄ = (exp(Δa) − 1)/a · b` per diagonal entry, with the
/// limit `B̄ = Δ·b` once `|Δa| < 1e-8`.
pub fn zoh_discretize_per_channel(ssm: &ContinuousSsm, deltas: &[f64]) -> Result<DiscreteSsm> {
    let (h, n) = (ssm.channels(), ssm.state_size());
    if deltas.len() != h {
        return Err(Error::shape("zoh_discretize", &[h], &[deltas.len()]));
    }
    if let Some(d) = deltas.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::invalid("zoh_discretize", format!("step size must be > 0, got {d}")));
    }
    let mut a_bar = vec![0.0; h * n];
    let mut b_bar = vec![0.0; h * n];
    for ch in 0..h {
        for s in 0..n {
            let i = ch * n + s;
            let a = ssm.a.data()[i];
            a_bar[i] = (deltas[ch] * a).exp();
            b_bar[i] = kernels::zoh_gain(a, deltas[ch]) * ssm.b.data()[i];
        }
    }
    Ok(DiscreteSsm {
        a_bar: Tensor::new(vec![h, n], a_bar)?,
        b_bar: Tensor::new(vec![h, n], b_bar)?,
        c: ssm.c.clone(),
        d: ssm.d.clone(),
        delta: deltas.to_vec(),
    })
}

/// Sequential evaluation from `h_0 = 0`. `x` is `[T × H]`.
pub fn recurrence(disc: &DiscreteSsm, x: &Tensor) -> Result<Tensor> {
    let (t_len, h) = disc.check_input(x)?;
    let n = disc.state_size();
    let (ab, bb, c, d) = (disc.a_bar.data(), disc.b_bar.data(), disc.c.data(), disc.d.data());
    let mut y = vec![0.0; t_len * h];
    let mut state = vec![0.0; h * n];
    for t in 0..t_len {
        for ch in 0..h {
            let xv = x.data()[t * h + ch];
            let mut acc = d[ch] * xv;
            for s in 0..n {
                let i = ch * n + s;
                state[i] = ab[i] * state[i] + bb[i] * xv;
                acc += c[i] * state[i];
            }
            y[t * h + ch] = acc;
        }
    }
    Tensor::new(vec![t_len, h], y)
}

/// Materialised kernel `K[l, h] = Σ_n C Ā^l B̄`, `l ∈ [0, len)`.
pub fn conv_kernel(disc: &DiscreteSsm, len: usize) -> Result<Tensor> {
    if len == 0 {
        return Err(Error::invalid("conv_kernel", "length must be ≥ 1"));
    }
    let (h, n) = (disc.channels(), disc.state_size());
    let mut k = vec![0.0; len * h];
    for ch in 0..h {
        for s in 0..n {
            let i = ch * n + s;
            let (a, cb) = (disc.a_bar.data()[i], disc.c.data()[i] * disc.b_bar.data()[i]);
            let mut pow = 1.0;
            for l in 0..len {
                k[l * h + ch] += cb * pow;
                pow *= a;
            }
        }
    }
    Tensor::new(vec![len, h], k)
}

/// `y[t] = Σ_{l ≤ t} K[l] x[t − l] + D x[t]`, per channel. The kernel must cover `T`.
pub fn causal_convolve(kernel: &Tensor, d: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (ks, xs) = (kernel.shape(), x.shape());
    if ks.len() != 2 || xs.len() != 2 || ks[1] != xs[1] || ks[0] < xs[0] || d.shape() != [xs[1]] {
        return Err(Error::shape("causal_convolve", ks, xs));
    }
    let (t_len, h) = (xs[0], xs[1]);
    let mut y = vec![0.0; t_len * h];
    for t in 0..t_len {
        for ch in 0..h {
            let mut acc = d.data()[ch] * x.data()[t * h + ch];
            for l in 0..=t {
                acc += kernel.data()[l * h + ch] * x.data()[(t - l) * h + ch];
            }
            y[t * h + ch] = acc;
        }
    }
    Tensor::new(vec![t_len, h], y)
}

/// Convolutional view of [`recurrence`].
pub fn convolve(disc: &DiscreteSsm, x: &Tensor) -> Result<Tensor> {
    let (t_len, _) = disc.check_input(x)?;
    if t_len == 0 {
        return Tensor::new(x.shape().to_vec(), Vec::new());
    }
    causal_convolve(&conv_kernel(disc, t_len)?, &disc.d, x)
}

/// Scan view of [`recurrence`]: each `(channel, state)` lane is an affine-map
/// scan over elements `(Ā, B̄ x_t)`; lanes run in parallel.
pub fn parallel_scan(disc: &DiscreteSsm, x: &Tensor) -> Result<Tensor> {
    let (t_len, h) = disc.check_input(x)?;
    let n = disc.state_size();
    let per_channel: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|ch| {
            let xs: Vec<f64> = (0..t_len).map(|t| x.data()[t * h + ch]).collect();
            let mut y: Vec<f64> = xs.iter().map(|v| disc.d.data()[ch] * v).collect();
            for s in 0..n {
                let i = ch * n + s;
                let a = vec![disc.a_bar.data()[i]; t_len];
                let b: Vec<f64> = xs.iter().map(|v| disc.b_bar.data()[i] * v).collect();
                let states = scan::affine_scan(&a, &b);
                let c = disc.c.data()[i];
                for (yv, hv) in y.iter_mut().zip(states) {
                    *yv += c * hv;
                }
            }
            y
        })
        .collect();
    let mut y = vec![0.0; t_len * h];
    for (ch, col) in per_channel.into_iter().enumerate() {
        for (t, v) in col.into_iter().enumerate() {
            y[t * h + ch] = v;
        }
    }
    Tensor::new(vec![t_len, h], y)
}

// ----- tape-level ------------------------------------------------------------

/// Differentiable recurrence. `a_bar`, `b_bar`, `c`: `[H, N]`; `d`: `[H]`; `x`: `[T, H]`.
pub fn recurrence_var(tape: &mut Tape, a_bar: Var, b_bar: Var, c: Var, d: Var, x: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let hs = tape.shape(a_bar).to_vec();
    if xs.len() != 2 || hs.len() != 2 || xs[1] != hs[0] {
        return Err(Error::shape("recurrence", &hs, &xs));
    }
    let (t_len, h) = (xs[0], xs[1]);
    let x3 = tape.reshape(x, &[t_len, h, 1])?;
    let drive = tape.mul(x3, b_bar)?;
    let states = tape.linear_scan(a_bar, drive)?;
    let read = tape.mul(states, c)?;
    let y = tape.sum_axis(read, 2)?;
    let y = tape.reshape(y, &[t_len, h])?;
    let skip = tape.mul(x, d)?;
    tape.add(y, skip)
}

/// Differentiable ZOH: returns `(Ā, B̄)` from `a` `[H, N]`, per-channel `delta` `[H, 1]` and `b` `[H, N]`.
pub fn zoh_discretize_var(tape: &mut Tape, a: Var, delta: Var, b: Var) -> Result<(Var, Var)> {
    let z = tape.mul(a, delta)?;
    let a_bar = tape.exp(z)?;
    let gain = tape.zoh_gain(a, delta)?;
    let b_bar = tape.mul(gain, b)?;
    Ok((a_bar, b_bar))
}

/// S4 layer with diagonal real state matrix (S4D-style), ZOH-discretised with a
/// learnable per-channel step.
///
/// Parameters: `log_neg_a` (`A = −exp(·)`), `b`, `c` of shape `[H, N]`, `d` and `log_dt` of shape `[H]`.
#[derive(Clone, Debug)]
pub struct S4Layer {
    pub prefix: String,
    pub channels: usize,
    pub state_size: usize,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl S4Layer {
    pub fn new(prefix: impl Into<String>, channels: usize, state_size: usize) -> Self {
        S4Layer {
            prefix: prefix.into(),
            channels,
            state_size,
            dt_min: 1e-3,
            dt_max: 1e-1,
        }
    }

    fn path(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    pub fn init(&self, init: &mut Init) {
        let (h, n) = (self.channels, self.state_size);
        let log_neg_a: Vec<f64> = (0..h)
            .flat_map(|_| (0..n).map(|i| ((i as f64 + 1.0) / 2.0).ln()))
            .collect();
        init.set(&self.path("log_neg_a"), Tensor::new(vec![h, n], log_neg_a).expect("shape"));
        let bound = 1.0 / (n as f64).sqrt();
        init.uniform(&self.path("b"), &[h, n], bound);
        init.uniform(&self.path("c"), &[h, n], bound);
        init.ones(&self.path("d"), &[h]);
        let ratio = self.dt_max / self.dt_min;
        let log_dt: Vec<f64> = (0..h)
            .map(|i| {
                let frac = if h > 1 { i as f64 / (h - 1) as f64 } else { 0.0 };
                (self.dt_min * ratio.powf(frac)).ln()
            })
            .collect();
        init.set(&self.path("log_dt"), Tensor::vector(log_dt));
    }

    /// `x: [T, H]` → `[T, H]`, causal.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.channels;
        let log_neg_a = g.p(&self.path("log_neg_a"))?;
        let (b, c, d, log_dt) = (
            g.p(&self.path("b"))?,
            g.p(&self.path("c"))?,
            g.p(&self.path("d"))?,
            g.p(&self.path("log_dt"))?,
        );
        let t = &mut *g.tape;
        let neg_a = t.exp(log_neg_a)?;
        let a = t.neg(neg_a)?;
        let dt = t.exp(log_dt)?;
        let dt = t.reshape(dt, &[h, 1])?;
        let (a_bar, b_bar) = zoh_discretize_var(t, a, dt, b)?;
        recurrence_var(t, a_bar, b_bar, c, d, x)
    }

    /// The discretised system currently held by `store`.
    pub fn discrete(&self, store: &crate::params::ParamStore) -> Result<DiscreteSsm> {
        let a = store.get(&self.path("log_neg_a"))?.map(|v| -v.exp());
        let cont = ContinuousSsm::new(
            a,
            store.get(&self.path("b"))?.clone(),
            store.get(&self.path("c"))?.clone(),
            store.get(&self.path("d"))?.clone(),
        )?;
        let dts: Vec<f64> = store.get(&self.path("log_dt"))?.data().iter().map(|v| v.exp()).collect();
        zoh_discretize_per_channel(&cont, &dts)
    }
}

/// Input-dependent SSM parameters for `H` channels, state size `N` and step rank `R`.
///
/// * `x_proj_w` `[H, R + 2N]`, `x_proj_b` `[R + 2N]`: frame → (low-rank Δ, `B_t`, `C_t`)
/// * `dt_proj_w` `[R, H]`, `dt_bias` `[H]`: `Δ_t = softplus(low · W + bias)`
/// * `a_log` `[H, N]`: `A = −exp(a_log)`
/// * `d` `[H]`
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveParams {
    pub x_proj_w: Tensor,
    pub x_proj_b: Tensor,
    pub dt_proj_w: Tensor,
    pub dt_bias: Tensor,
    pub a_log: Tensor,
    pub d: Tensor,
}

/// [`SelectiveParams`] placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SelectiveVars {
    pub x_proj_w: Var,
    pub x_proj_b: Var,
    pub dt_proj_w: Var,
    pub dt_bias: Var,
    pub a_log: Var,
    pub d: Var,
}

impl SelectiveParams {
    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state_size(&self) -> usize {
        self.a_log.shape()[1]
    }

    pub fn dt_rank(&self) -> usize {
        self.dt_proj_w.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> SelectiveVars {
        SelectiveVars {
            x_proj_w: tape.leaf(self.x_proj_w.clone(), trainable),
            x_proj_b: tape.leaf(self.x_proj_b.clone(), trainable),
            dt_proj_w: tape.leaf(self.dt_proj_w.clone(), trainable),
            dt_bias: tape.leaf(self.dt_bias.clone(), trainable),
            a_log: tape.leaf(self.a_log.clone(), trainable),
            d: tape.leaf(self.d.clone(), trainable),
        }
    }
}

/// Selective scan on plain values. `x: [T, H]`.
pub fn selective_scan(params: &SelectiveParams, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = selective_scan_var(&mut tape, &vars, xv)?;
    Ok(tape.value(y).clone())
}

/// Differentiable selective scan.
///
/// Per step: `Ā_t = exp(Δ_t A)`, `B̄_t = Δ_t B_t`, `h_t = Ā_t h_{t−1} + B̄_t x_t`,
/// `y_t = C_t · h_t + D x_t`.
pub fn selective_scan_var(tape: &mut Tape, p: &SelectiveVars, x: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ps = tape.shape(p.a_log).to_vec();
    if xs.len() != 2 || ps.len() != 2 || xs[1] != ps[0] {
        return Err(Error::shape("selective_scan", &ps, &xs));
    }
    let (t_len, h, n) = (xs[0], xs[1], ps[1]);
    let rank = tape.shape(p.dt_proj_w)[0];

    let proj = tape.matmul(x, p.x_proj_w)?;
    let proj = tape.add(proj, p.x_proj_b)?;
    let dt_low = tape.slice(proj, 1, 0, rank)?;
    let b_t = tape.slice(proj, 1, rank, n)?;
    let c_t = tape.slice(proj, 1, rank + n, n)?;

    let dt = tape.matmul(dt_low, p.dt_proj_w)?;
    let dt = tape.add(dt, p.dt_bias)?;
    let dt = tape.softplus(dt)?;
    let dt3 = tape.reshape(dt, &[t_len, h, 1])?;

    let neg_a = tape.exp(p.a_log)?;
    let a = tape.neg(neg_a)?;
    let z = tape.mul(dt3, a)?;
    let decay = tape.exp(z)?;

    let x3 = tape.reshape(x, &[t_len, h, 1])?;
    let dx = tape.mul(dt3, x3)?;
    let b3 = tape.reshape(b_t, &[t_len, 1, n])?;
    let drive = tape.mul(dx, b3)?;

    let states = tape.linear_scan(decay, drive)?;
    let c3 = tape.reshape(c_t, &[t_len, 1, n])?;
    let read = tape.mul(states, c3)?;
    let y = tape.sum_axis(read, 2)?;
    let y = tape.reshape(y, &[t_len, h])?;
    let skip = tape.mul(x, p.d)?;
    tape.add(y, skip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_disc(a: f64, b: f64, c: f64, d: f64) -> DiscreteSsm {
        DiscreteSsm::new(
            Tensor::new(vec![1, 1], vec![a]).unwrap(),
            Tensor::new(vec![1, 1], vec![b]).unwrap(),
            Tensor::new(vec![1, 1], vec![c]).unwrap(),
            Tensor::vector(vec![d]),
        )
        .unwrap()
    }

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn zoh_closed_form() {
        let ssm = ContinuousSsm::new(
            Tensor::new(vec![1, 1], vec![-1.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            Tensor::vector(vec![0.0]),
        )
        .unwrap();
        let disc = zoh_discretize(&ssm, 0.1).unwrap();
        assert!((disc.a_bar.item() - 0.9048374180359595).abs() < 1e-15);
        assert!((disc.b_bar.item() - 0.09516258196404048).abs() < 1e-15);
        assert!(matches!(zoh_discretize(&ssm, 0.0), Err(Error::Invalid { .. })));
        assert!(matches!(zoh_discretize(&ssm, -1.0), Err(Error::Invalid { .. })));
    }

    #[test]
    fn zoh_small_a_takes_limit() {
        let ssm = ContinuousSsm::new(
            Tensor::new(vec![1, 1], vec![-1e-10]).unwrap(),
            Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            Tensor::vector(vec![0.0]),
        )
        .unwrap();
        let disc = zoh_discretize(&ssm, 0.5).unwrap();
        assert_eq!(disc.b_bar.item(), 0.5);
        assert!(disc.a_bar.item() < 1.0);
    }

    #[test]
    fn non_negative_a_rejected() {
        let r = ContinuousSsm::new(
            Tensor::new(vec![1, 1], vec![0.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            Tensor::vector(vec![0.0]),
        );
        assert!(r.is_err());
    }

    #[test]
    fn recurrence_examples() {
        let x = col(&[0.3, -1.0, 2.0, 0.5]);
        let passthrough = recurrence(&scalar_disc(0.0, 1.0, 1.0, 0.0), &x).unwrap();
        assert_eq!(passthrough, x);
        let skip = recurrence(&scalar_disc(0.0, 0.0, 0.0, 1.0), &x).unwrap();
        assert_eq!(skip, x);
        let impulse = recurrence(&scalar_disc(0.5, 1.0, 1.0, 0.0), &col(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(impulse.data(), &[1.0, 0.5, 0.25, 0.125]);
    }

    #[test]
    fn kernel_examples() {
        let k = conv_kernel(&scalar_disc(0.5, 1.0, 1.0, 0.0), 4).unwrap();
        assert_eq!(k.data(), &[1.0, 0.5, 0.25, 0.125]);
        let zero = conv_kernel(&scalar_disc(0.5, 1.0, 0.0, 0.0), 4).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(conv_kernel(&scalar_disc(0.5, 1.0, 0.0, 0.0), 0).is_err());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let disc = scalar_disc(0.5, 1.0, 1.0, 0.0);
        let x = Tensor::zeros(&[4, 2]);
        assert!(matches!(recurrence(&disc, &x), Err(Error::Shape { .. })));
        assert!(parallel_scan(&disc, &x).is_err());
    }

    #[test]
    fn scan_single_step_and_unit_decay() {
        let disc = scalar_disc(0.7, 2.0, 1.5, 0.25);
        let x = col(&[0.8]);
        assert_eq!(parallel_scan(&disc, &x).unwrap(), recurrence(&disc, &x).unwrap());

        let disc = scalar_disc(1.0, 1.0, 1.0, 0.0);
        let xs: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let y = parallel_scan(&disc, &col(&xs)).unwrap();
        let mut acc = 0.0;
        for (t, v) in y.data().iter().enumerate() {
            acc += xs[t];
            assert!((v - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_s4_matches_value_recurrence() {
        let layer = S4Layer::new("s4", 3, 4);
        let mut store = crate::params::ParamStore::new();
        layer.init(&mut Init::new(11, &mut store));
        let x = Tensor::new(vec![20, 3], (0..60).map(|i| (i as f64 * 0.13).cos()).collect()).unwrap();
        let mut tape = Tape::new();
        let mut g = Graph::bind(&mut tape, &store, false);
        let xv = g.tape.constant(x.clone());
        let y = layer.forward(&mut g, xv).unwrap();
        let expected = recurrence(&layer.discrete(&store).unwrap(), &x).unwrap();
        assert!(tape.value(y).max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let p = SelectiveParams {
            x_proj_w: Tensor::full(&[2, 5], 0.3),
            x_proj_b: Tensor::full(&[5], 0.1),
            dt_proj_w: Tensor::full(&[1, 2], 0.2),
            dt_bias: Tensor::vector(vec![-1.0, 0.5]),
            a_log: Tensor::zeros(&[2, 2]),
            d: Tensor::ones(&[2]),
        };
        let y = selective_scan(&p, &Tensor::zeros(&[6, 2])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
