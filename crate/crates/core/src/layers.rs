//! Attention-family building blocks and small dense layers.
//!
//! Each layer is a plain description (a parameter path prefix plus sizes).
//! `init` writes its parameters into a store, `forward` reads them back from
//! a [`Graph`]. Sequences are time-major `[T × d]`.

use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};
use crate::params::{Graph, Init};

fn join(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

/// Affine map `x·W + b`, `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub prefix: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Linear {
            prefix: prefix.into(),
            d_in,
            d_out,
        }
    }

    pub fn weight_path(&self) -> String {
        join(&self.prefix, "weight")
    }

    pub fn bias_path(&self) -> String {
        join(&self.prefix, "bias")
    }

    pub fn init(&self, init: &mut Init) {
        init.uniform(&self.weight_path(), &[self.d_in, self.d_out], 1.0 / (self.d_in as f64).sqrt());
        init.zeros(&self.bias_path(), &[self.d_out]);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.p(&self.weight_path())?, g.p(&self.bias_path())?);
        let y = g.tape.matmul(x, w)?;
        g.tape.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub prefix: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        LayerNorm {
            prefix: prefix.into(),
            dim,
        }
    }

    pub fn init(&self, init: &mut Init) {
        init.ones(&join(&self.prefix, "gamma"), &[self.dim]);
        init.zeros(&join(&self.prefix, "beta"), &[self.dim]);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.p(&join(&self.prefix, "gamma"))?;
        let beta = g.p(&join(&self.prefix, "beta"))?;
        g.tape.layer_norm(x, gamma, beta)
    }
}

/// `linear(d → mult·d) → GELU → linear(mult·d → d)`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(prefix: &str, dim: usize, mult: usize) -> Self {
        FeedForward {
            up: Linear::new(join(prefix, "up"), dim, dim * mult),
            down: Linear::new(join(prefix, "down"), dim * mult, dim),
        }
    }

    pub fn init(&self, init: &mut Init) {
        self.up.init(init);
        self.down.init(init);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.tape.gelu(h)?;
        let h = g.dropout(h)?;
        self.down.forward(g, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        Ok(AttentionConfig { d_model, n_heads })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Scaled dot-product attention over `n_heads` heads with input and output projections.
/// No causal mask.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, cfg: AttentionConfig) -> Self {
        let d = cfg.d_model;
        MultiHeadAttention {
            cfg,
            q: Linear::new(join(prefix, "q"), d, d),
            k: Linear::new(join(prefix, "k"), d, d),
            v: Linear::new(join(prefix, "v"), d, d),
            out: Linear::new(join(prefix, "out"), d, d),
        }
    }

    pub fn init(&self, init: &mut Init) {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.init(init);
        }
    }

    /// `[T, d]` → `[H, T, d_head]`.
    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let t_len = g.tape.shape(x)[0];
        let (h, dh) = (self.cfg.n_heads, self.cfg.d_head());
        let x = g.tape.reshape(x, &[t_len, h, dh])?;
        g.tape.transpose(x, 0, 1)
    }

    fn check(&self, g: &Graph, q: Var, k: Var, v: Var) -> Result<()> {
        let d = self.cfg.d_model;
        let (sq, sk, sv) = (g.tape.shape(q), g.tape.shape(k), g.tape.shape(v));
        if sq.len() != 2 || sq[1] != d {
            return Err(Error::shape("multi_head_attention", &[sq.first().copied().unwrap_or(0), d], sq));
        }
        if sk.len() != 2 || sk[1] != d || sk != sv {
            return Err(Error::shape("multi_head_attention", sk, sv));
        }
        if sk[0] == 0 {
            return Err(Error::invalid("multi_head_attention", "empty key sequence"));
        }
        Ok(())
    }

    /// Attention weights `[H, T_q, T_k]`, each row summing to 1.
    pub fn weights(&self, g: &mut Graph, q_in: Var, k_in: Var) -> Result<Var> {
        self.check(g, q_in, k_in, k_in)?;
        let q = self.q.forward(g, q_in)?;
        let k = self.k.forward(g, k_in)?;
        let q = self.split_heads(g, q)?;
        let k = self.split_heads(g, k)?;
        let kt = g.tape.t(k)?;
        let scores = g.tape.matmul(q, kt)?;
        let scores = g.tape.scale(scores, 1.0 / (self.cfg.d_head() as f64).sqrt())?;
        g.tape.softmax(scores)
    }

    pub fn forward(&self, g: &mut Graph, q_in: Var, k_in: Var, v_in: Var) -> Result<Var> {
        self.check(g, q_in, k_in, v_in)?;
        let t_q = g.tape.shape(q_in)[0];
        let w = self.weights(g, q_in, k_in)?;
        let w = g.dropout(w)?;
        let v = self.v.forward(g, v_in)?;
        let v = self.split_heads(g, v)?;
        let ctx = g.tape.matmul(w, v)?;
        let ctx = g.tape.transpose(ctx, 0, 1)?;
        let ctx = g.tape.reshape(ctx, &[t_q, self.cfg.d_model])?;
        self.out.forward(g, ctx)
    }
}

/// Sinusoidal table scaled by a learnable scalar.
#[derive(Clone, Debug)]
pub struct PositionalEncoding {
    pub prefix: String,
    pub max_len: usize,
    pub dim: usize,
    table: Tensor,
}

impl PositionalEncoding {
    pub fn new(prefix: impl Into<String>, max_len: usize, dim: usize) -> Self {
        PositionalEncoding {
            prefix: prefix.into(),
            max_len,
            dim,
            table: sinusoid_table(max_len, dim),
        }
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn scale_path(&self) -> String {
        join(&self.prefix, "scale")
    }

    pub fn init(&self, init: &mut Init) {
        init.ones(&self.scale_path(), &[1]);
    }

    /// `x + scale · table[0:T]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let t_len = g.tape.shape(x)[0];
        if t_len > self.max_len {
            return Err(Error::invalid(
                "positional_encode",
                format!("sequence length {t_len} exceeds table length {}", self.max_len),
            ));
        }
        let rows = self.table.rows(0, t_len)?;
        let table = g.tape.constant(rows);
        let scale = g.p(&self.scale_path())?;
        let scaled = g.tape.mul(table, scale)?;
        g.tape.add(x, scaled)
    }
}

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn sinusoid_table(max_len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; max_len * dim];
    for p in 0..max_len {
        for j in 0..dim {
            let i2 = (j / 2 * 2) as f64;
            let angle = p as f64 / 10000f64.powf(i2 / dim as f64);
            data[p * dim + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![max_len, dim], data).expect("table shape")
}

/// Embedding Strength Modulator.
///
/// With `SE` the subject's embedding row and `P0` the position-encoded input:
///
/// ```text
/// M = MH(query = P0, key = value = LN(SE) + SE)
/// F = FFN(LN(M)) + M
/// ```
///
/// `SE` is a single time step, so every query attends to it with weight 1 and
/// `F` is a learned per-subject vector repeated over time.
#[derive(Clone, Debug)]
pub struct Esm {
    pub prefix: String,
    pub n_subjects: usize,
    pub attn: MultiHeadAttention,
    pub se_norm: LayerNorm,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl Esm {
    pub fn new(prefix: &str, cfg: AttentionConfig, n_subjects: usize, ffn_mult: usize) -> Self {
        let d = cfg.d_model;
        Esm {
            prefix: prefix.to_string(),
            n_subjects,
            attn: MultiHeadAttention::new(&join(prefix, "attn"), cfg),
            se_norm: LayerNorm::new(join(prefix, "se_norm"), d),
            ffn_norm: LayerNorm::new(join(prefix, "ffn_norm"), d),
            ffn: FeedForward::new(&join(prefix, "ffn"), d, ffn_mult),
        }
    }

    pub fn table_path(&self) -> String {
        join(&self.prefix, "subject_table")
    }

    pub fn init(&self, init: &mut Init) {
        init.normal(&self.table_path(), &[self.n_subjects, self.attn.cfg.d_model], 1.0);
        self.attn.init(init);
        self.se_norm.init(init);
        self.ffn_norm.init(init);
        self.ffn.init(init);
    }

    /// Row `subject` of the embedding table, `[1, d]`.
    pub fn subject_embedding(&self, g: &mut Graph, subject: usize) -> Result<Var> {
        if subject >= self.n_subjects {
            return Err(Error::UnknownSubject {
                id: subject,
                n_subjects: self.n_subjects,
            });
        }
        let table = g.p(&self.table_path())?;
        g.tape.slice(table, 0, subject, 1)
    }

    pub fn forward(&self, g: &mut Graph, p0: Var, subject: usize) -> Result<Var> {
        let se = self.subject_embedding(g, subject)?;
        let se_n = self.se_norm.forward(g, se)?;
        let kv = g.tape.add(se_n, se)?;
        let m = self.attn.forward(g, p0, kv, kv)?;
        let h = self.ffn_norm.forward(g, m)?;
        let f = self.ffn.forward(g, h)?;
        g.tape.add(f, m)
    }
}

/// Attention against learned key/value memories `Mk`, `Mv` of `S` slots.
///
/// Affinities `x·Mkᵀ` are softmax-normalised along the sequence axis and then
/// L1-normalised across slots, so each time step holds a distribution over
/// slots. The output mixes memory rows: `A · Mv`. Cost is `O(T·S·d)`.
#[derive(Clone, Debug)]
pub struct ExternalAttention {
    pub prefix: String,
    pub dim: usize,
    pub slots: usize,
}

impl ExternalAttention {
    pub fn new(prefix: impl Into<String>, dim: usize, slots: usize) -> Self {
        ExternalAttention {
            prefix: prefix.into(),
            dim,
            slots,
        }
    }

    pub fn init(&self, init: &mut Init) {
        let bound = 1.0 / (self.dim as f64).sqrt();
        init.uniform(&join(&self.prefix, "mk"), &[self.slots, self.dim], bound);
        init.uniform(&join(&self.prefix, "mv"), &[self.slots, self.dim], bound);
    }

    /// Normalised attention map `[T, S]`.
    pub fn weights(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mk = g.p(&join(&self.prefix, "mk"))?;
        let mkt = g.tape.t(mk)?;
        let logits = g.tape.matmul(x, mkt)?;
        let by_slot = g.tape.t(logits)?;
        let over_time = g.tape.softmax(by_slot)?;
        let attn = g.tape.t(over_time)?;
        let mass = g.tape.abs(attn)?;
        let norm = g.tape.sum_axis(mass, 1)?;
        g.tape.div(attn, norm)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let a = self.weights(g, x)?;
        let a = g.dropout(a)?;
        let mv = g.p(&join(&self.prefix, "mv"))?;
        g.tape.matmul(a, mv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use crate::params::ParamStore;
    use crate::rng::Rng;

    fn init_store(seed: u64, f: impl FnOnce(&mut Init)) -> ParamStore {
        let mut store = ParamStore::new();
        f(&mut Init::new(seed, &mut store));
        store
    }

    fn eval(store: &ParamStore, f: impl FnOnce(&mut Graph) -> Result<Var>) -> Tensor {
        let mut tape = Tape::new();
        let mut g = Graph::bind(&mut tape, store, false);
        let out = f(&mut g).unwrap();
        tape.value(out).clone()
    }

    fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape).map(|_| rng.normal())
    }

    fn identity_attention(d: usize) -> (MultiHeadAttention, ParamStore) {
        let mha = MultiHeadAttention::new("a", AttentionConfig::new(d, 1).unwrap());
        let store = init_store(0, |init| {
            for l in [&mha.q, &mha.k, &mha.v, &mha.out] {
                init.set(&l.weight_path(), Tensor::eye(d));
                init.zeros(&l.bias_path(), &[d]);
            }
        });
        (mha, store)
    }

    #[test]
    fn two_key_attention_example() {
        let (mha, store) = identity_attention(2);
        let w = eval(&store, |g| {
            let q = g.tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]])?);
            let k = g.tape.constant(Tensor::eye(2));
            mha.weights(g, q, k)
        });
        assert_eq!(w.shape(), &[1, 1, 2]);
        assert!((w.data()[0] - 0.6698).abs() < 1e-4, "{:?}", w.data());
        assert!((w.data()[1] - 0.3302).abs() < 1e-4);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = AttentionConfig::new(8, 2).unwrap();
        let mha = MultiHeadAttention::new("a", cfg);
        let store = init_store(1, |i| mha.init(i));
        let mut rng = Rng::new(2);
        let (q, k) = (randn(&mut rng, &[5, 8]), randn(&mut rng, &[7, 8]));
        let w = eval(&store, |g| {
            let (q, k) = (g.tape.constant(q), g.tape.constant(k));
            mha.weights(g, q, k)
        });
        assert_eq!(w.shape(), &[2, 5, 7]);
        for row in w.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn singleton_key_gets_full_weight_and_identical_keys_share_it() {
        let mha = MultiHeadAttention::new("a", AttentionConfig::new(4, 2).unwrap());
        let store = init_store(3, |i| mha.init(i));
        let mut rng = Rng::new(4);
        let q = randn(&mut rng, &[6, 4]);
        let key = randn(&mut rng, &[1, 4]);
        let single = eval(&store, |g| {
            let (q, k) = (g.tape.constant(q.clone()), g.tape.constant(key.clone()));
            mha.weights(g, q, k)
        });
        assert!(single.data().iter().all(|&v| v == 1.0));

        let repeated = Tensor::cat_rows(&[key.clone(), key.clone(), key]).unwrap();
        let w = eval(&store, |g| {
            let (q, k) = (g.tape.constant(q), g.tape.constant(repeated));
            mha.weights(g, q, k)
        });
        assert!(w.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let mha = MultiHeadAttention::new("a", AttentionConfig::new(6, 3).unwrap());
        let store = init_store(5, |i| mha.init(i));
        let mut rng = Rng::new(6);
        let x = randn(&mut rng, &[5, 6]);
        let perm = [3, 0, 4, 1, 2];
        let px = Tensor::cat_rows(&perm.iter().map(|&i| x.rows(i, 1).unwrap()).collect::<Vec<_>>()).unwrap();
        let run = |x: Tensor| {
            eval(&store, |g| {
                let v = g.tape.constant(x);
                mha.forward(g, v, v, v)
            })
        };
        let (y, py) = (run(x), run(px));
        for (dst, &src) in perm.iter().enumerate() {
            assert!(py.rows(dst, 1).unwrap().max_abs_diff(&y.rows(src, 1).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_mismatched_widths() {
        assert!(AttentionConfig::new(6, 4).is_err());
        let mha = MultiHeadAttention::new("a", AttentionConfig::new(4, 2).unwrap());
        let store = init_store(0, |i| mha.init(i));
        let mut tape = Tape::new();
        let mut g = Graph::bind(&mut tape, &store, false);
        let q = g.tape.constant(Tensor::zeros(&[3, 4]));
        let k = g.tape.constant(Tensor::zeros(&[3, 5]));
        assert!(mha.forward(&mut g, q, k, k).is_err());
    }

    #[test]
    fn positional_table_values() {
        let t = sinusoid_table(4, 6);
        assert_eq!(t.rows(0, 1).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((t.at(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
        assert!((t.at(&[2, 3]) - (2.0 / 10000f64.powf(2.0 / 6.0)).cos()).abs() < 1e-15);
    }

    #[test]
    fn positional_scale_zero_is_identity() {
        let pe = PositionalEncoding::new("pos", 16, 4);
        let store = init_store(0, |i| i.set(&pe.scale_path(), Tensor::vector(vec![0.0])));
        let x = randn(&mut Rng::new(1), &[9, 4]);
        let y = eval(&store, |g| {
            let v = g.tape.constant(x.clone());
            pe.forward(g, v)
        });
        assert_eq!(y, x);
    }

    #[test]
    fn positional_encoding_rejects_long_input() {
        let pe = PositionalEncoding::new("pos", 8, 4);
        let store = init_store(0, |i| pe.init(i));
        let mut tape = Tape::new();
        let mut g = Graph::bind(&mut tape, &store, false);
        let x = g.tape.constant(Tensor::zeros(&[9, 4]));
        assert!(pe.forward(&mut g, x).is_err());
    }

    fn esm_fixture(seed: u64) -> (Esm, ParamStore) {
        let esm = Esm::new("esm", AttentionConfig::new(8, 2).unwrap(), 3, 2);
        let store = init_store(seed, |i| esm.init(i));
        (esm, store)
    }

    fn esm_out(esm: &Esm, store: &ParamStore, p0: &Tensor, subject: usize) -> Tensor {
        eval(store, |g| {
            let x = g.tape.constant(p0.clone());
            esm.forward(g, x, subject)
        })
    }

    #[test]
    fn esm_depends_on_subject_not_on_time() {
        let (esm, store) = esm_fixture(7);
        let p0 = randn(&mut Rng::new(8), &[5, 8]);
        let a = esm_out(&esm, &store, &p0, 0);
        let b = esm_out(&esm, &store, &p0, 1);
        assert!(a.max_abs_diff(&b) > 1e-6);
        let first = a.rows(0, 1).unwrap();
        for t in 1..5 {
            assert!(a.rows(t, 1).unwrap().max_abs_diff(&first) < 1e-12);
        }
    }

    #[test]
    fn esm_with_zero_ffn_returns_attention_output() {
        let (esm, mut store) = esm_fixture(9);
        let p0 = randn(&mut Rng::new(10), &[4, 8]);
        let m = eval(&store, |g| {
            let x = g.tape.constant(p0.clone());
            let se = esm.subject_embedding(g, 2)?;
            let se_n = esm.se_norm.forward(g, se)?;
            let kv = g.tape.add(se_n, se)?;
            esm.attn.forward(g, x, kv, kv)
        });
        for path in [esm.ffn.down.weight_path(), esm.ffn.down.bias_path()] {
            let z = store.get(&path).unwrap().map(|_| 0.0);
            store.insert(path, z);
        }
        let f = esm_out(&esm, &store, &p0, 2);
        assert!(f.max_abs_diff(&m) < 1e-15);
    }

    #[test]
    fn esm_rejects_unknown_subject() {
        let (esm, store) = esm_fixture(0);
        let mut tape = Tape::new();
        let mut g = Graph::bind(&mut tape, &store, false);
        let x = g.tape.constant(Tensor::zeros(&[2, 8]));
        assert!(matches!(
            esm.forward(&mut g, x, 3),
            Err(Error::UnknownSubject { id: 3, n_subjects: 3 })
        ));
    }

    #[test]
    fn external_attention_rows_sum_to_one() {
        let ext = ExternalAttention::new("ext", 6, 5);
        let store = init_store(11, |i| ext.init(i));
        let x = randn(&mut Rng::new(12), &[9, 6]);
        let a = eval(&store, |g| {
            let v = g.tape.constant(x.clone());
            ext.weights(g, v)
        });
        assert_eq!(a.shape(), &[9, 5]);
        for row in a.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn external_attention_single_slot_broadcasts_memory() {
        let ext = ExternalAttention::new("ext", 4, 1);
        let store = init_store(13, |i| ext.init(i));
        let x = randn(&mut Rng::new(14), &[6, 4]);
        let y = eval(&store, |g| {
            let v = g.tape.constant(x.clone());
            ext.forward(g, v)
        });
        let mv = store.get("ext.mv").unwrap();
        for t in 0..6 {
            assert!(y.rows(t, 1).unwrap().reshape(&[4]).unwrap().max_abs_diff(&mv.reshape(&[4]).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn external_attention_matches_two_pass_loops() {
        let (t_len, d, s) = (7, 3, 4);
        let ext = ExternalAttention::new("ext", d, s);
        let store = init_store(15, |i| ext.init(i));
        let x = randn(&mut Rng::new(16), &[t_len, d]);
        let y = eval(&store, |g| {
            let v = g.tape.constant(x.clone());
            ext.forward(g, v)
        });
        let (mk, mv) = (store.get("ext.mk").unwrap(), store.get("ext.mv").unwrap());
        let mut logits = vec![vec![0.0; s]; t_len];
        for (t, row) in logits.iter_mut().enumerate() {
            for (j, l) in row.iter_mut().enumerate() {
                *l = (0..d).map(|c| x.at(&[t, c]) * mk.at(&[j, c])).sum();
            }
        }
        let mut a = logits.clone();
        for j in 0..s {
            let mx = (0..t_len).map(|t| logits[t][j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..t_len).map(|t| (logits[t][j] - mx).exp()).sum();
            for t in 0..t_len {
                a[t][j] = (logits[t][j] - mx).exp() / z;
            }
        }
        for t in 0..t_len {
            let n: f64 = a[t].iter().sum();
            for c in 0..d {
                let want: f64 = (0..s).map(|j| a[t][j] / n * mv.at(&[j, c])).sum();
                assert!((y.at(&[t, c]) - want).abs() < 1e-12);
            }
        }
    }
}
