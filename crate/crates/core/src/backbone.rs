//! Macaron backbone: Conformer-style blocks whose sequence mixer is either
//! multi-head self-attention or a Mamba block.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{AttentionConfig, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::{ConvSpec, Tensor, Var};
use crate::params::{Graph, Init};
use crate::ssm::{selective_scan_var, SelectiveVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixerKind {
    Mhsa,
    Mamba,
}

/// Which mixer each backbone block uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixerSchedule {
    AllMhsa,
    AllMamba,
    /// MHSA, Mamba, MHSA, ...
    Alternate,
}

impl MixerSchedule {
    pub const ALL: [MixerSchedule; 3] = [MixerSchedule::AllMamba, MixerSchedule::AllMhsa, MixerSchedule::Alternate];

    pub fn kind_at(self, block: usize) -> MixerKind {
        match self {
            MixerSchedule::AllMhsa => MixerKind::Mhsa,
            MixerSchedule::AllMamba => MixerKind::Mamba,
            MixerSchedule::Alternate if block % 2 == 0 => MixerKind::Mhsa,
            MixerSchedule::Alternate => MixerKind::Mamba,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MixerSchedule::AllMhsa => "all_mhsa",
            MixerSchedule::AllMamba => "all_mamba",
            MixerSchedule::Alternate => "alternate",
        }
    }
}

impl fmt::Display for MixerSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MixerSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MixerSchedule::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mixer schedule `{s}` (expected all_mhsa, all_mamba or alternate)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaConfig {
    pub expand: usize,
    pub state_size: usize,
    pub conv_width: usize,
}

impl Default for MambaConfig {
    fn default() -> Self {
        MambaConfig {
            expand: 2,
            state_size: 16,
            conv_width: 4,
        }
    }
}

const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// `y = proj_out(selective_scan(SiLU(conv(proj_in(x)))) ⊙ SiLU(proj_gate(x)))`.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub prefix: String,
    pub dim: usize,
    pub cfg: MambaConfig,
    pub proj_in: Linear,
    pub proj_gate: Linear,
    pub proj_out: Linear,
}

impl MambaBlock {
    pub fn new(prefix: &str, dim: usize, cfg: MambaConfig) -> Self {
        let inner = cfg.expand * dim;
        MambaBlock {
            prefix: prefix.to_string(),
            dim,
            cfg,
            proj_in: Linear::new(format!("{prefix}.proj_in"), dim, inner),
            proj_gate: Linear::new(format!("{prefix}.proj_gate"), dim, inner),
            proj_out: Linear::new(format!("{prefix}.proj_out"), inner, dim),
        }
    }

    pub fn inner(&self) -> usize {
        self.cfg.expand * self.dim
    }

    pub fn dt_rank(&self) -> usize {
        self.dim.div_ceil(16)
    }

    fn path(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    pub fn init(&self, init: &mut Init) {
        let (e, n, r, k) = (self.inner(), self.cfg.state_size, self.dt_rank(), self.cfg.conv_width);
        self.proj_in.init(init);
        self.proj_gate.init(init);
        self.proj_out.init(init);
        init.uniform(&self.path("conv.weight"), &[e, 1, k], 1.0 / (k as f64).sqrt());
        init.zeros(&self.path("conv.bias"), &[e]);
        init.uniform(&self.path("ssm.x_proj_w"), &[e, r + 2 * n], 1.0 / (e as f64).sqrt());
        init.zeros(&self.path("ssm.x_proj_b"), &[r + 2 * n]);
        init.uniform(&self.path("ssm.dt_proj_w"), &[r, e], 1.0 / (r as f64).sqrt());
        let mut rng = init.rng(&self.path("ssm.dt_bias"));
        let ratio = (DT_MAX / DT_MIN).ln();
        let dt_bias: Vec<f64> = (0..e)
            .map(|_| inverse_softplus(DT_MIN * (ratio * rng.uniform()).exp()))
            .collect();
        init.set(&self.path("ssm.dt_bias"), Tensor::vector(dt_bias));
        let a_log: Vec<f64> = (0..e).flat_map(|_| (0..n).map(|i| (i as f64 + 1.0).ln())).collect();
        init.set(&self.path("ssm.a_log"), Tensor::new(vec![e, n], a_log).expect("shape"));
        init.ones(&self.path("ssm.d"), &[e]);
    }

    pub fn selective_vars(&self, g: &Graph) -> Result<SelectiveVars> {
        Ok(SelectiveVars {
            x_proj_w: g.p(&self.path("ssm.x_proj_w"))?,
            x_proj_b: g.p(&self.path("ssm.x_proj_b"))?,
            dt_proj_w: g.p(&self.path("ssm.dt_proj_w"))?,
            dt_bias: g.p(&self.path("ssm.dt_bias"))?,
            a_log: g.p(&self.path("ssm.a_log"))?,
            d: g.p(&self.path("ssm.d"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let e = self.inner();
        let u = self.proj_in.forward(g, x)?;
        let (cw, cb) = (g.p(&self.path("conv.weight"))?, g.p(&self.path("conv.bias"))?);
        let spec = ConvSpec::new(1, self.cfg.conv_width - 1, 0, e);
        let u = g.tape.conv1d(u, cw, spec)?;
        let u = g.tape.add(u, cb)?;
        let u = g.tape.silu(u)?;
        let vars = self.selective_vars(g)?;
        let y = selective_scan_var(g.tape, &vars, u)?;
        let gate = self.proj_gate.forward(g, x)?;
        let gate = g.tape.silu(gate)?;
        let y = g.tape.mul(y, gate)?;
        self.proj_out.forward(g, y)
    }
}

/// `pw(d→2d) → GLU → depthwise conv → LN → SiLU → pw(d→d)`.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub prefix: String,
    pub dim: usize,
    pub kernel: usize,
    pub pw_in: Linear,
    pub norm: LayerNorm,
    pub pw_out: Linear,
}

impl ConvModule {
    pub fn new(prefix: &str, dim: usize, kernel: usize) -> Self {
        ConvModule {
            prefix: prefix.to_string(),
            dim,
            kernel,
            pw_in: Linear::new(format!("{prefix}.pw_in"), dim, 2 * dim),
            norm: LayerNorm::new(format!("{prefix}.norm"), dim),
            pw_out: Linear::new(format!("{prefix}.pw_out"), dim, dim),
        }
    }

    pub fn init(&self, init: &mut Init) {
        self.pw_in.init(init);
        init.uniform(
            &format!("{}.depthwise.weight", self.prefix),
            &[self.dim, 1, self.kernel],
            1.0 / (self.kernel as f64).sqrt(),
        );
        init.zeros(&format!("{}.depthwise.bias", self.prefix), &[self.dim]);
        self.norm.init(init);
        self.pw_out.init(init);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let d = self.dim;
        let h = self.pw_in.forward(g, x)?;
        let value = g.tape.slice(h, 1, 0, d)?;
        let gate = g.tape.slice(h, 1, d, d)?;
        let gate = g.tape.sigmoid(gate)?;
        let h = g.tape.mul(value, gate)?;
        let w = g.p(&format!("{}.depthwise.weight", self.prefix))?;
        let b = g.p(&format!("{}.depthwise.bias", self.prefix))?;
        let left = (self.kernel - 1) / 2;
        let h = g.tape.conv1d(h, w, ConvSpec::new(1, left, self.kernel - 1 - left, d))?;
        let h = g.tape.add(h, b)?;
        let h = self.norm.forward(g, h)?;
        let h = g.tape.silu(h)?;
        self.pw_out.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub enum Mixer {
    Mhsa(MultiHeadAttention),
    Mamba(MambaBlock),
}

impl Mixer {
    pub fn kind(&self) -> MixerKind {
        match self {
            Mixer::Mhsa(_) => MixerKind::Mhsa,
            Mixer::Mamba(_) => MixerKind::Mamba,
        }
    }

    pub fn init(&self, init: &mut Init) {
        match self {
            Mixer::Mhsa(m) => m.init(init),
            Mixer::Mamba(m) => m.init(init),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Mixer::Mhsa(m) => m.forward(g, x, x, x),
            Mixer::Mamba(m) => m.forward(g, x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub attention: AttentionConfig,
    pub mamba: MambaConfig,
    pub ffn_mult: usize,
    pub conv_kernel: usize,
}

/// Pre-norm macaron block with half-scaled feed-forward sandwiches and a final LN.
#[derive(Clone, Debug)]
pub struct MacaronBlock {
    pub ffn1_norm: LayerNorm,
    pub ffn1: FeedForward,
    pub mixer_norm: LayerNorm,
    pub mixer: Mixer,
    pub conv_norm: LayerNorm,
    pub conv: ConvModule,
    pub ffn2_norm: LayerNorm,
    pub ffn2: FeedForward,
    pub out_norm: LayerNorm,
}

impl MacaronBlock {
    pub fn new(prefix: &str, kind: MixerKind, cfg: &BlockConfig) -> Self {
        let d = cfg.attention.d_model;
        let mixer = match kind {
            MixerKind::Mhsa => Mixer::Mhsa(MultiHeadAttention::new(&format!("{prefix}.mhsa"), cfg.attention)),
            MixerKind::Mamba => Mixer::Mamba(MambaBlock::new(&format!("{prefix}.mamba"), d, cfg.mamba)),
        };
        MacaronBlock {
            ffn1_norm: LayerNorm::new(format!("{prefix}.ffn1_norm"), d),
            ffn1: FeedForward::new(&format!("{prefix}.ffn1"), d, cfg.ffn_mult),
            mixer_norm: LayerNorm::new(format!("{prefix}.mixer_norm"), d),
            mixer,
            conv_norm: LayerNorm::new(format!("{prefix}.conv_norm"), d),
            conv: ConvModule::new(&format!("{prefix}.conv"), d, cfg.conv_kernel),
            ffn2_norm: LayerNorm::new(format!("{prefix}.ffn2_norm"), d),
            ffn2: FeedForward::new(&format!("{prefix}.ffn2"), d, cfg.ffn_mult),
            out_norm: LayerNorm::new(format!("{prefix}.out_norm"), d),
        }
    }

    pub fn init(&self, init: &mut Init) {
        self.ffn1_norm.init(init);
        self.ffn1.init(init);
        self.mixer_norm.init(init);
        self.mixer.init(init);
        self.conv_norm.init(init);
        self.conv.init(init);
        self.ffn2_norm.init(init);
        self.ffn2.init(init);
        self.out_norm.init(init);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.ffn1_norm.forward(g, x)?;
        let h = self.ffn1.forward(g, h)?;
        let h = g.tape.scale(h, 0.5)?;
        let x = g.tape.add(x, h)?;

        let h = self.mixer_norm.forward(g, x)?;
        let h = self.mixer.forward(g, h)?;
        let h = g.dropout(h)?;
        let x = g.tape.add(x, h)?;

        let h = self.conv_norm.forward(g, x)?;
        let h = self.conv.forward(g, h)?;
        let h = g.dropout(h)?;
        let x = g.tape.add(x, h)?;

        let h = self.ffn2_norm.forward(g, x)?;
        let h = self.ffn2.forward(g, h)?;
        let h = g.tape.scale(h, 0.5)?;
        let x = g.tape.add(x, h)?;

        self.out_norm.forward(g, x)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub blocks: Vec<MacaronBlock>,
}

impl Backbone {
    pub fn new(prefix: &str, n_blocks: usize, schedule: MixerSchedule, cfg: &BlockConfig) -> Self {
        Backbone {
            blocks: (0..n_blocks)
                .map(|i| MacaronBlock::new(&format!("{prefix}.blocks.{i}"), schedule.kind_at(i), cfg))
                .collect(),
        }
    }

    pub fn init(&self, init: &mut Init) {
        self.blocks.iter().for_each(|b| b.init(init));
    }

    /// Fuses the two streams additively, then runs the block stack.
    pub fn forward(&self, g: &mut Graph, pre: Var, esm_raw: Var) -> Result<Var> {
        let (sp, se) = (g.tape.shape(pre), g.tape.shape(esm_raw));
        if sp != se {
            return Err(Error::shape("backbone", sp, se));
        }
        let mut z = g.tape.add(pre, esm_raw)?;
        for b in &self.blocks {
            z = b.forward(g, z)?;
        }
        Ok(z)
    }
}
