//! Raw array kernels shared by the tape's forward and backward passes.

/// Numpy-style broadcast of two shapes (right-aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out`; broadcast axes get stride 0.
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let o = nd - shape.len() + i;
        strides[o] = if shape[i] == 1 && out[o] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every element of `out` with the matching flat offsets into two broadcast operands.
pub fn walk_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums a gradient of shape `out` down to the operand shape `target`.
pub fn reduce_to(grad: &[f64], out: &[usize], target: &[usize]) -> Vec<f64> {
    if out == target {
        return grad.to_vec();
    }
    let numel: usize = target.iter().product();
    let mut acc = vec![0.0; numel];
    let st = broadcast_strides(target, out);
    let zeros = vec![0; out.len()];
    walk_broadcast(out, &st, &zeros, |i, o, _| acc[o] += grad[i]);
    acc
}

/// `c[m×n] += a[m×k] · b[k×n]`.
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Swaps two axes of a row-major array.
pub fn transpose_axes(data: &[f64], shape: &[usize], d0: usize, d1: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(d0, d1);
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(d0, d1);
    let mut out = vec![0.0; data.len()];
    let zeros = vec![0; nd];
    walk_broadcast(&out_shape, &perm_strides, &zeros, |i, src, _| out[i] = data[src]);
    (out, out_shape)
}

/// Geometry of a 1-D convolution over time-major input `[T × C_in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, pad_left: usize, pad_right: usize, groups: usize) -> Self {
        ConvSpec {
            stride,
            pad_left,
            pad_right,
            groups,
        }
    }

    pub fn causal(kernel: usize) -> Self {
        Self::new(1, kernel - 1, 0, 1)
    }
}

pub struct ConvDims {
    pub t_in: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub t_out: usize,
}

/// `x[T, C_in]`, `w[C_out, C_in/g, K]` → `y[T_out, C_out]`.
pub fn conv1d_forward(x: &[f64], w: &[f64], d: &ConvDims, s: &ConvSpec) -> Vec<f64> {
    let mut y = vec![0.0; d.t_out * d.c_out];
    let cin_g = d.c_in / s.groups;
    let cout_g = d.c_out / s.groups;
    for t in 0..d.t_out {
        for co in 0..d.c_out {
            let g = co / cout_g;
            let mut acc = 0.0;
            for k in 0..d.k {
                let pos = (t * s.stride + k) as isize - s.pad_left as isize;
                if pos < 0 || pos as usize >= d.t_in {
                    continue;
                }
                let xrow = &x[pos as usize * d.c_in + g * cin_g..][..cin_g];
                let wbase = co * cin_g * d.k + k;
                for (ci, &xv) in xrow.iter().enumerate() {
                    acc += w[wbase + ci * d.k] * xv;
                }
            }
            y[t * d.c_out + co] = acc;
        }
    }
    y
}

pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    d: &ConvDims,
    s: &ConvSpec,
) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let cin_g = d.c_in / s.groups;
    let cout_g = d.c_out / s.groups;
    for t in 0..d.t_out {
        for co in 0..d.c_out {
            let g = co / cout_g;
            let gv = gy[t * d.c_out + co];
            if gv == 0.0 {
                continue;
            }
            for k in 0..d.k {
                let pos = (t * s.stride + k) as isize - s.pad_left as isize;
                if pos < 0 || pos as usize >= d.t_in {
                    continue;
                }
                let xoff = pos as usize * d.c_in + g * cin_g;
                let wbase = co * cin_g * d.k + k;
                for ci in 0..cin_g {
                    gw[wbase + ci * d.k] += gv * x[xoff + ci];
                    gx[xoff + ci] += gv * w[wbase + ci * d.k];
                }
            }
        }
    }
    (gx, gw)
}

/// Transposed convolution: `x[T, C_in]`, `w[C_in, C_out/g, K]`; `pad_left`/`pad_right` crop the full output.
pub fn conv_transpose1d_forward(x: &[f64], w: &[f64], d: &ConvDims, s: &ConvSpec) -> Vec<f64> {
    let mut y = vec![0.0; d.t_out * d.c_out];
    let cin_g = d.c_in / s.groups;
    let cout_g = d.c_out / s.groups;
    for t in 0..d.t_in {
        for ci in 0..d.c_in {
            let xv = x[t * d.c_in + ci];
            if xv == 0.0 {
                continue;
            }
            let g = ci / cin_g;
            for k in 0..d.k {
                let pos = (t * s.stride + k) as isize - s.pad_left as isize;
                if pos < 0 || pos as usize >= d.t_out {
                    continue;
                }
                let yrow = &mut y[pos as usize * d.c_out + g * cout_g..][..cout_g];
                let wbase = ci * cout_g * d.k + k;
                for (co, yv) in yrow.iter_mut().enumerate() {
                    *yv += xv * w[wbase + co * d.k];
                }
            }
        }
    }
    y
}

pub fn conv_transpose1d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    d: &ConvDims,
    s: &ConvSpec,
) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let cin_g = d.c_in / s.groups;
    let cout_g = d.c_out / s.groups;
    for t in 0..d.t_in {
        for ci in 0..d.c_in {
            let g = ci / cin_g;
            let xv = x[t * d.c_in + ci];
            let mut acc = 0.0;
            for k in 0..d.k {
                let pos = (t * s.stride + k) as isize - s.pad_left as isize;
                if pos < 0 || pos as usize >= d.t_out {
                    continue;
                }
                let gyrow = &gy[pos as usize * d.c_out + g * cout_g..][..cout_g];
                let wbase = ci * cout_g * d.k + k;
                for (co, &gv) in gyrow.iter().enumerate() {
                    acc += gv * w[wbase + co * d.k];
                    gw[wbase + co * d.k] += gv * xv;
                }
            }
            gx[t * d.c_in + ci] = acc;
        }
    }
    (gx, gw)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Below this |Δ·a| the ZOH input gain takes its analytic limit Δ.
pub const ZOH_LIMIT: f64 = 1e-8;

/// ZOH input gain `(exp(Δ·a) − 1) / a`, with the `a → 0` limit `Δ`.
pub fn zoh_gain(a: f64, delta: f64) -> f64 {
    let z = delta * a;
    if z.abs() < ZOH_LIMIT {
        delta
    } else {
        z.exp_m1() / a
    }
}

/// Partial derivatives of [`zoh_gain`] with respect to `(a, Δ)`.
pub fn zoh_gain_grad(a: f64, delta: f64) -> (f64, f64) {
    let z = delta * a;
    let d_delta = z.exp();
    let d_a = if z.abs() < 1e-4 {
        delta * delta * (0.5 + z / 3.0 + z * z / 8.0)
    } else {
        (z * z.exp() - z.exp_m1()) / (a * a)
    };
    (d_a, d_delta)
}
