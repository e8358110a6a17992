//! U-Net pre-extractor with S4 blocks at the bottleneck.
//!
//! Encoder levels halve the time axis and double the width with stride-2
//! convolutions; the decoder mirrors them with transposed convolutions and
//! additive skips. Inputs are zero-padded on the right to a multiple of
//! `2^depth` and trimmed back, so the output length always equals the input length.

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::numerics::{ConvSpec, Var};
use crate::params::{Graph, Init};
use crate::ssm::S4Layer;

pub const SAMPLING_KERNEL: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub depth: usize,
    /// Width at the top level; projections map to and from the model width when they differ.
    pub base_width: usize,
    pub n_s4_blocks: usize,
    pub state_size: usize,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.n_s4_blocks == 0 || self.base_width == 0 || self.state_size == 0 {
            return Err(Error::Config(format!(
                "unet needs depth, base width, S4 block count and state size ≥ 1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn bottleneck_width(&self) -> usize {
        self.base_width << self.depth
    }
}

/// Pre-norm residual block: `x + linear(GELU(S4(LN(x))))`.
#[derive(Clone, Debug)]
pub struct S4Block {
    pub norm: LayerNorm,
    pub s4: S4Layer,
    pub proj: Linear,
}

impl S4Block {
    pub fn new(prefix: &str, width: usize, state_size: usize) -> Self {
        S4Block {
            norm: LayerNorm::new(format!("{prefix}.norm"), width),
            s4: S4Layer::new(format!("{prefix}.s4"), width, state_size),
            proj: Linear::new(format!("{prefix}.proj"), width, width),
        }
    }

    pub fn init(&self, init: &mut Init) {
        self.norm.init(init);
        self.s4.init(init);
        self.proj.init(init);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let h = self.s4.forward(g, h)?;
        let h = g.tape.gelu(h)?;
        let h = self.proj.forward(g, h)?;
        g.tape.add(x, h)
    }
}

/// Stride-2 convolution, kernel 4, `w → 2w`, then GELU: `[T, w]` → `[T/2, 2w]`.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub prefix: String,
    pub width: usize,
}

impl Downsample {
    pub fn init(&self, init: &mut Init) {
        let w = self.width;
        let bound = 1.0 / ((w * SAMPLING_KERNEL) as f64).sqrt();
        init.uniform(&format!("{}.weight", self.prefix), &[2 * w, w, SAMPLING_KERNEL], bound);
        init.zeros(&format!("{}.bias", self.prefix), &[2 * w]);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let t_len = g.tape.shape(x)[0];
        if t_len % 2 != 0 {
            return Err(Error::invalid("downsample", format!("length {t_len} is odd")));
        }
        let w = g.p(&format!("{}.weight", self.prefix))?;
        let b = g.p(&format!("{}.bias", self.prefix))?;
        let y = g.tape.conv1d(x, w, ConvSpec::new(2, 1, 1, 1))?;
        let y = g.tape.add(y, b)?;
        g.tape.gelu(y)
    }
}

/// Stride-2 transposed convolution `2w → w`, plus skip, then GELU: `[T, 2w]` → `[2T, w]`.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub prefix: String,
    pub width: usize,
}

impl Upsample {
    pub fn init(&self, init: &mut Init) {
        let w = self.width;
        let bound = 1.0 / ((2 * w * SAMPLING_KERNEL) as f64).sqrt();
        init.uniform(&format!("{}.weight", self.prefix), &[2 * w, w, SAMPLING_KERNEL], bound);
        init.zeros(&format!("{}.bias", self.prefix), &[w]);
    }

    pub fn forward(&self, g: &mut Graph, x: Var, skip: Var) -> Result<Var> {
        let (sx, ss) = (g.tape.shape(x).to_vec(), g.tape.shape(skip).to_vec());
        if sx.len() != 2 || ss.len() != 2 || ss[0] != 2 * sx[0] || sx[1] != 2 * ss[1] || ss[1] != self.width {
            return Err(Error::shape("upsample", &sx, &ss));
        }
        let w = g.p(&format!("{}.weight", self.prefix))?;
        let b = g.p(&format!("{}.bias", self.prefix))?;
        let y = g.tape.conv_transpose1d(x, w, ConvSpec::new(2, 1, 1, 1))?;
        let y = g.tape.add(y, b)?;
        let y = g.tape.add(y, skip)?;
        g.tape.gelu(y)
    }
}

#[derive(Clone, Debug)]
pub struct S4UNet {
    pub cfg: UNetConfig,
    pub dim: usize,
    pub input_proj: Option<Linear>,
    pub output_proj: Option<Linear>,
    pub down: Vec<Downsample>,
    pub bottleneck: Vec<S4Block>,
    pub up: Vec<Upsample>,
}

impl S4UNet {
    pub fn new(prefix: &str, dim: usize, cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let (input_proj, output_proj) = if cfg.base_width == dim {
            (None, None)
        } else {
            (
                Some(Linear::new(format!("{prefix}.input_proj"), dim, cfg.base_width)),
                Some(Linear::new(format!("{prefix}.output_proj"), cfg.base_width, dim)),
            )
        };
        let widths: Vec<usize> = (0..cfg.depth).map(|l| cfg.base_width << l).collect();
        Ok(S4UNet {
            cfg,
            dim,
            input_proj,
            output_proj,
            down: widths
                .iter()
                .enumerate()
                .map(|(l, &w)| Downsample {
                    prefix: format!("{prefix}.down.{l}"),
                    width: w,
                })
                .collect(),
            bottleneck: (0..cfg.n_s4_blocks)
                .map(|i| S4Block::new(&format!("{prefix}.bottleneck.{i}"), cfg.bottleneck_width(), cfg.state_size))
                .collect(),
            up: widths
                .iter()
                .enumerate()
                .map(|(l, &w)| Upsample {
                    prefix: format!("{prefix}.up.{l}"),
                    width: w,
                })
                .collect(),
        })
    }

    pub fn init(&self, init: &mut Init) {
        for p in self.input_proj.iter().chain(&self.output_proj) {
            p.init(init);
        }
        self.down.iter().for_each(|d| d.init(init));
        self.bottleneck.iter().for_each(|b| b.init(init));
        self.up.iter().for_each(|u| u.init(init));
    }

    /// `[T, d]` → `[T, d]` for any `T ≥ 1`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let t_len = g.tape.shape(x)[0];
        let multiple = 1usize << self.cfg.depth;
        let padded = t_len.div_ceil(multiple) * multiple;
        let mut h = if padded != t_len {
            g.tape.pad(x, 0, 0, padded - t_len)?
        } else {
            x
        };
        if let Some(p) = &self.input_proj {
            h = p.forward(g, h)?;
        }
        let mut skips = Vec::with_capacity(self.down.len());
        for d in &self.down {
            skips.push(h);
            h = d.forward(g, h)?;
        }
        for b in &self.bottleneck {
            h = b.forward(g, h)?;
        }
        for (u, skip) in self.up.iter().zip(skips).rev() {
            h = u.forward(g, h, skip)?;
        }
        if let Some(p) = &self.output_proj {
            h = p.forward(g, h)?;
        }
        if padded != t_len {
            h = g.tape.slice(h, 0, 0, t_len)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};
    use crate::params::ParamStore;
    use crate::rng::Rng;

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
    }

    fn randn(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::zeros(shape).map(|_| rng.normal())
    }

    fn eval(store: &ParamStore, x: &Tensor, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut g = Graph::bind(&mut tape, store, false);
        let xv = g.tape.constant(x.clone());
        let y = f(&mut g, xv)?;
        Ok(tape.value(y).clone())
    }

    fn zero(store: &mut ParamStore, path: &str) {
        let z = store.get(path).unwrap().map(|_| 0.0);
        store.insert(path, z);
    }

    fn unet(dim: usize, depth: usize, seed: u64) -> (S4UNet, ParamStore) {
        let cfg = UNetConfig {
            depth,
            base_width: dim,
            n_s4_blocks: 1,
            state_size: 4,
        };
        let net = S4UNet::new("unet", dim, cfg).unwrap();
        let mut store = ParamStore::new();
        net.init(&mut Init::new(seed, &mut store));
        (net, store)
    }

    #[test]
    fn s4_block_with_zero_projection_is_identity() {
        let block = S4Block::new("b", 4, 3);
        let mut store = ParamStore::new();
        block.init(&mut Init::new(1, &mut store));
        zero(&mut store, &block.proj.weight_path());
        let x = randn(2, &[10, 4]);
        let y = eval(&store, &x, |g, v| block.forward(g, v)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn s4_block_with_passthrough_ssm() {
        let block = S4Block::new("b", 3, 2);
        let mut store = ParamStore::new();
        block.init(&mut Init::new(3, &mut store));
        zero(&mut store, "b.s4.c");
        let x = randn(4, &[6, 3]);
        let y = eval(&store, &x, |g, v| block.forward(g, v)).unwrap();
        let want = eval(&store, &x, |g, v| {
            let h = block.norm.forward(g, v)?;
            let h = g.tape.gelu(h)?;
            let h = block.proj.forward(g, h)?;
            g.tape.add(v, h)
        })
        .unwrap();
        assert!(y.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn downsample_halves_time_and_doubles_width() {
        let down = Downsample {
            prefix: "d".into(),
            width: 64,
        };
        let mut store = ParamStore::new();
        down.init(&mut Init::new(5, &mut store));
        let y = eval(&store, &randn(6, &[320, 64]), |g, v| down.forward(g, v)).unwrap();
        assert_eq!(y.shape(), &[160, 128]);
        assert!(eval(&store, &randn(6, &[321, 64]), |g, v| down.forward(g, v)).is_err());
    }

    #[test]
    fn upsample_with_zero_kernel_passes_skip_through() {
        let up = Upsample {
            prefix: "u".into(),
            width: 3,
        };
        let mut store = ParamStore::new();
        up.init(&mut Init::new(7, &mut store));
        zero(&mut store, "u.weight");
        store.insert("u.bias", Tensor::vector(vec![0.5, -1.0, 2.0]));
        let x = randn(8, &[5, 6]);
        let skip = randn(9, &[10, 3]);
        let y = eval(&store, &x, |g, v| {
            let s = g.tape.constant(skip.clone());
            up.forward(g, v, s)
        })
        .unwrap();
        assert_eq!(y.shape(), &[10, 3]);
        let bias = store.get("u.bias").unwrap();
        for t in 0..10 {
            for c in 0..3 {
                assert!((y.at(&[t, c]) - gelu(skip.at(&[t, c]) + bias.data()[c])).abs() < 1e-15);
            }
        }
        let bad = eval(&store, &x, |g, v| {
            let s = g.tape.constant(Tensor::zeros(&[9, 3]));
            up.forward(g, v, s)
        });
        assert!(bad.is_err());
    }

    #[test]
    fn output_length_matches_input() {
        let (net, store) = unet(4, 2, 10);
        for t_len in [1, 3, 4, 7, 320, 321] {
            let y = eval(&store, &randn(t_len as u64, &[t_len, 4]), |g, v| net.forward(g, v)).unwrap();
            assert_eq!(y.shape(), &[t_len, 4], "T = {t_len}");
            assert!(y.is_finite());
        }
    }

    #[test]
    fn projections_appear_only_when_widths_differ() {
        let cfg = UNetConfig {
            depth: 1,
            base_width: 6,
            n_s4_blocks: 2,
            state_size: 2,
        };
        let net = S4UNet::new("unet", 4, cfg).unwrap();
        let mut store = ParamStore::new();
        net.init(&mut Init::new(0, &mut store));
        assert!(store.contains("unet.input_proj.weight"));
        assert_eq!(store.get("unet.bottleneck.1.s4.b").unwrap().shape(), &[12, 2]);
        let y = eval(&store, &randn(1, &[9, 4]), |g, v| net.forward(g, v)).unwrap();
        assert_eq!(y.shape(), &[9, 4]);

        let (_, same) = unet(4, 1, 0);
        assert!(!same.contains("unet.input_proj.weight"));
        assert!(S4UNet::new("u", 4, UNetConfig { depth: 0, ..cfg }).is_err());
    }

    #[test]
    fn zero_right_padding_leaves_trimmed_output_unchanged() {
        let (net, store) = unet(3, 1, 11);
        let x = randn(12, &[41, 3]);
        let padded = Tensor::cat_rows(&[x.clone(), Tensor::zeros(&[9, 3])]).unwrap();
        let y = eval(&store, &x, |g, v| net.forward(g, v)).unwrap();
        let yp = eval(&store, &padded, |g, v| net.forward(g, v)).unwrap();
        assert!(yp.rows(0, 41).unwrap().max_abs_diff(&y) < 1e-13);
    }

    #[test]
    fn lookahead_is_bounded() {
        let (net, store) = unet(2, 1, 13);
        let x = randn(14, &[64, 2]);
        let mut bumped = x.clone();
        bumped.data_mut()[40 * 2] += 1.0;
        let y = eval(&store, &x, |g, v| net.forward(g, v)).unwrap();
        let yb = eval(&store, &bumped, |g, v| net.forward(g, v)).unwrap();
        assert!(yb.rows(0, 37).unwrap().max_abs_diff(&y.rows(0, 37).unwrap()) == 0.0);
        assert!(yb.rows(37, 3).unwrap().max_abs_diff(&y.rows(37, 3).unwrap()) > 0.0);
    }
}
