//! Scans over the affine-map monoid `h ↦ a·h + b`.
//!
//! Element `t` is the map `(a_t, b_t)`. Composition is ordered left to right in
//! time: applying `(a₁, b₁)` and then `(a₂, b₂)` gives `(a₂a₁, a₂b₁ + b₂)`.
//! With `h₀ = 0` the state `h_t` is the offset of the prefix composition.

/// Sequences shorter than this use the serial path.
pub const PARALLEL_MIN_LEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub a: f64,
    pub b: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { a: 1.0, b: 0.0 };

    /// `self` first, then `later`.
    #[inline]
    pub fn then(self, later: Affine) -> Affine {
        Affine {
            a: later.a * self.a,
            b: later.a * self.b + later.b,
        }
    }
}

/// `h_t = a_t·h_{t−1} + b_t` by direct iteration.
pub fn serial(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    let mut h = 0.0;
    a.iter()
        .zip(b)
        .map(|(&at, &bt)| {
            h = at * h + bt;
            h
        })
        .collect()
}

/// Work-efficient (Blelloch) scan: up-sweep reduction, down-sweep of exclusive
/// prefixes, then one application of each element.
pub fn blelloch(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    if n == 0 {
        return Vec::new();
    }
    let size = n.next_power_of_two();
    let mut tree: Vec<Affine> = a
        .iter()
        .zip(b)
        .map(|(&a, &b)| Affine { a, b })
        .collect();
    tree.resize(size, Affine::IDENTITY);

    let mut d = 1;
    while d < size {
        let mut i = 2 * d - 1;
        while i < size {
            tree[i] = tree[i - d].then(tree[i]);
            i += 2 * d;
        }
        d *= 2;
    }

    tree[size - 1] = Affine::IDENTITY;
    let mut d = size / 2;
    while d >= 1 {
        let mut i = 2 * d - 1;
        while i < size {
            let left_total = tree[i - d];
            let prefix = tree[i];
            tree[i - d] = prefix;
            tree[i] = prefix.then(left_total);
            i += 2 * d;
        }
        d /= 2;
    }

    (0..n)
        .map(|t| tree[t].then(Affine { a: a[t], b: b[t] }).b)
        .collect()
}

/// Dispatches to [`serial`] below [`PARALLEL_MIN_LEN`] and to [`blelloch`] otherwise.
pub fn affine_scan(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.len() < PARALLEL_MIN_LEN {
        serial(a, b)
    } else {
        blelloch(a, b)
    }
}

/// Scans each lane of time-major `[T × L]` data.
///
/// `decay` is either `[T × L]` or a time-invariant `[L]`.
pub fn scan_lanes(decay: &[f64], drive: &[f64], t_len: usize, lanes: usize) -> Vec<f64> {
    let varying = decay.len() == drive.len();
    let mut out = vec![0.0; drive.len()];
    let mut a = vec![0.0; t_len];
    let mut b = vec![0.0; t_len];
    for l in 0..lanes {
        for t in 0..t_len {
            a[t] = if varying { decay[t * lanes + l] } else { decay[l] };
            b[t] = drive[t * lanes + l];
        }
        let h = affine_scan(&a, &b);
        for (t, v) in h.into_iter().enumerate() {
            out[t * lanes + l] = v;
        }
    }
    out
}
