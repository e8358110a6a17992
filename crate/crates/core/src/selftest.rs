//! Embedded verification suite: gradient checks of every tape op and layer,
//! kernel equivalences, metric oracles and format round trips.
//!
//! The builders here are public so integration tests can reuse them.

use std::time::Instant;

use crate::backbone::{BlockConfig, MacaronBlock, MambaBlock, MambaConfig, MixerKind};
use crate::data::{decode, encode, inference_segments, Dtype};
use crate::error::Result;
use crate::layers::{AttentionConfig, Esm, ExternalAttention, MultiHeadAttention};
use crate::model::{loss_var, pearson_r, Model, ModelConfig};
use crate::numerics::{grad_check, ConvSpec, GradCheckOptions, GradCheckReport, OpKind, Tape, Tensor, Var};
use crate::params::{Graph, Init, ParamStore};
use crate::rng::Rng;
use crate::s4unet::{S4Block, S4UNet, UNetConfig};
use crate::ssm::{self, DiscreteSsm, SelectiveParams};
use crate::train::lr_at_epoch;

pub type ScalarFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

pub fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).map(|_| rng.normal())
}

pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::zeros(shape).map(|_| rng.uniform_range(lo, hi))
}

/// `Σ y ⊙ w` with a fixed pseudo-random `w` of `y`'s shape.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::keyed(seed, "projection");
    let w = randn(&mut rng, tape.shape(y));
    let w = tape.constant(w);
    let yw = tape.mul(y, w)?;
    tape.sum(yw)
}

/// Inputs and a scalar function exercising `kind`.
pub fn op_case(kind: OpKind, seed: u64) -> (Vec<Tensor>, ScalarFn) {
    let mut rng = Rng::stream(seed, kind as u64);
    let mut n = |shape: &[usize]| randn(&mut rng, shape);
    macro_rules! case {
        ($inputs:expr, |$t:ident, $v:ident| $body:expr) => {{
            let f: ScalarFn = Box::new(move |$t: &mut Tape, $v: &[Var]| {
                let y = $body;
                project($t, y, seed)
            });
            ($inputs, f)
        }};
    }
    match kind {
        OpKind::Add => case!(vec![n(&[3, 4]), n(&[4])], |t, v| t.add(v[0], v[1])?),
        OpKind::Sub => case!(vec![n(&[3, 1]), n(&[3, 4])], |t, v| t.sub(v[0], v[1])?),
        OpKind::Mul => case!(vec![n(&[2, 3, 4]), n(&[3, 1])], |t, v| t.mul(v[0], v[1])?),
        OpKind::Div => {
            let den = n(&[3, 4]).map(|x| if x >= 0.0 { x + 0.5 } else { x - 0.5 });
            case!(vec![n(&[3, 4]), den], |t, v| t.div(v[0], v[1])?)
        }
        OpKind::MatMul => case!(vec![n(&[2, 3, 4]), n(&[4, 5]), n(&[2, 5, 2])], |t, v| {
            let ab = t.matmul(v[0], v[1])?;
            t.matmul(ab, v[2])?
        }),
        OpKind::Transpose => case!(vec![n(&[2, 3, 4])], |t, v| t.transpose(v[0], 0, 2)?),
        OpKind::Reshape => case!(vec![n(&[2, 6])], |t, v| t.reshape(v[0], &[3, 2, 2])?),
        OpKind::Concat => case!(vec![n(&[2, 3]), n(&[2, 1]), n(&[2, 2])], |t, v| t.concat(v, 1)?),
        OpKind::Slice => case!(vec![n(&[5, 3])], |t, v| t.slice(v[0], 0, 1, 3)?),
        OpKind::Pad => case!(vec![n(&[3, 2])], |t, v| t.pad(v[0], 0, 1, 2)?),
        OpKind::Conv1d => case!(vec![n(&[9, 4]), n(&[6, 2, 3])], |t, v| t.conv1d(
            v[0],
            v[1],
            ConvSpec::new(2, 1, 2, 2)
        )?),
        OpKind::ConvTranspose1d => case!(vec![n(&[5, 4]), n(&[4, 3, 4])], |t, v| t.conv_transpose1d(
            v[0],
            v[1],
            ConvSpec::new(2, 1, 1, 1)
        )?),
        OpKind::Softmax => case!(vec![n(&[3, 5])], |t, v| t.softmax(v[0])?),
        OpKind::LayerNorm => case!(vec![n(&[4, 6]), n(&[6]), n(&[6])], |t, v| t.layer_norm(v[0], v[1], v[2])?),
        OpKind::Gelu => case!(vec![n(&[3, 4])], |t, v| t.gelu(v[0])?),
        OpKind::Silu => case!(vec![n(&[3, 4])], |t, v| t.silu(v[0])?),
        OpKind::Softplus => case!(vec![n(&[3, 4])], |t, v| t.softplus(v[0])?),
        OpKind::Sigmoid => case!(vec![n(&[3, 4])], |t, v| t.sigmoid(v[0])?),
        OpKind::Exp => case!(vec![n(&[3, 4])], |t, v| t.exp(v[0])?),
        OpKind::Log => case!(vec![n(&[3, 4]).map(|x| x.abs() + 0.2)], |t, v| t.log(v[0])?),
        OpKind::Sqrt => case!(vec![n(&[3, 4]).map(|x| x.abs() + 0.2)], |t, v| t.sqrt(v[0])?),
        OpKind::Abs => case!(
            vec![n(&[3, 4]).map(|x| if x >= 0.0 { x + 0.1 } else { x - 0.1 })],
            |t, v| t.abs(v[0])?
        ),
        OpKind::Power => case!(vec![n(&[3, 4]).map(|x| x.abs() + 0.2)], |t, v| t.powf(v[0], 2.5)?),
        OpKind::Scale => case!(vec![n(&[3, 4])], |t, v| t.scale(v[0], -1.7)?),
        OpKind::Offset => case!(vec![n(&[3, 4])], |t, v| t.offset(v[0], 0.3)?),
        OpKind::Sum => case!(vec![n(&[3, 4])], |t, v| t.sum(v[0])?),
        OpKind::Mean => case!(vec![n(&[3, 4])], |t, v| t.mean(v[0])?),
        OpKind::SumAxis => case!(vec![n(&[3, 4, 2])], |t, v| t.sum_axis(v[0], 1)?),
        OpKind::MeanAxis => case!(vec![n(&[3, 4])], |t, v| t.mean_axis(v[0], 0)?),
        OpKind::LinearScan => {
            let decay = uniform(&mut rng, &[70, 2, 3], -0.95, 0.95);
            let fixed = uniform(&mut rng, &[2, 3], 0.1, 0.9);
            let drive = randn(&mut rng, &[70, 2, 3]);
            let drive2 = randn(&mut rng, &[5, 2, 3]);
            case!(vec![decay, drive, fixed, drive2], |t, v| {
                let a = t.linear_scan(v[0], v[1])?;
                let b = t.linear_scan(v[2], v[3])?;
                let a = t.slice(a, 0, 0, 5)?;
                t.add(a, b)?
            })
        }
        OpKind::ZohGain => {
            let a = Tensor::new(vec![4, 1], vec![-1.3, -0.2, -3e-6, 0.7]).expect("shape");
            let dt = uniform(&mut rng, &[1, 3], 0.05, 0.8);
            case!(vec![a, dt], |t, v| t.zoh_gain(v[0], v[1])?)
        }
    }
}

pub fn op_grad_check(kind: OpKind, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (inputs, f) = op_case(kind, seed);
    grad_check(&inputs, opts, |t, v| f(t, v))
}

/// Random diagonal system with `|Ā| < 1`.
pub fn random_stable_ssm(rng: &mut Rng, h: usize, n: usize) -> DiscreteSsm {
    DiscreteSsm::new(
        uniform(rng, &[h, n], -0.99, 0.99),
        randn(rng, &[h, n]),
        randn(rng, &[h, n]),
        randn(rng, &[h]),
    )
    .expect("consistent shapes")
}

/// Selective parameters whose projections ignore the input (zero input
/// weights), together with the fixed system they are equivalent to.
pub fn frozen_selective(rng: &mut Rng, h: usize, n: usize, rank: usize) -> (SelectiveParams, DiscreteSsm) {
    let bias_low: Vec<f64> = (0..rank).map(|_| rng.normal()).collect();
    let b: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let c: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let dt_proj_w = randn(rng, &[rank, h]).map(|v| 0.3 * v);
    let dt_bias = uniform(rng, &[h], -3.0, 0.0);
    let a_log = uniform(rng, &[h, n], -1.0, 1.0);
    let d = randn(rng, &[h]);

    let mut x_proj_b = bias_low.clone();
    x_proj_b.extend(&b);
    x_proj_b.extend(&c);
    let params = SelectiveParams {
        x_proj_w: Tensor::zeros(&[h, rank + 2 * n]),
        x_proj_b: Tensor::vector(x_proj_b),
        dt_proj_w: dt_proj_w.clone(),
        dt_bias: dt_bias.clone(),
        a_log: a_log.clone(),
        d: d.clone(),
    };

    let mut a_bar = Vec::with_capacity(h * n);
    let mut b_bar = Vec::with_capacity(h * n);
    let mut c_full = Vec::with_capacity(h * n);
    for ch in 0..h {
        let pre: f64 = dt_bias.data()[ch] + (0..rank).map(|r| bias_low[r] * dt_proj_w.at(&[r, ch])).sum::<f64>();
        let delta = if pre > 30.0 { pre } else { pre.exp().ln_1p() };
        for s in 0..n {
            a_bar.push((-delta * a_log.at(&[ch, s]).exp()).exp());
            b_bar.push(delta * b[s]);
            c_full.push(c[s]);
        }
    }
    let disc = DiscreteSsm::new(
        Tensor::new(vec![h, n], a_bar).expect("shape"),
        Tensor::new(vec![h, n], b_bar).expect("shape"),
        Tensor::new(vec![h, n], c_full).expect("shape"),
        d,
    )
    .expect("consistent shapes");
    (params, disc)
}

/// Gradient check of a parameterised module with respect to every parameter
/// in `store` and the module input `x`, through `Σ forward(x) ⊙ w`.
pub fn module_grad_check<F>(store: &ParamStore, x: Tensor, opts: &GradCheckOptions, forward: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var> + Sync,
{
    let names: Vec<String> = store.paths().cloned().collect();
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    inputs.push(x);
    let n = names.len();
    grad_check(&inputs, opts, |tape, vars| {
        let mut g = Graph::from_vars(tape, &names, &vars[..n]);
        let y = forward(&mut g, vars[n])?;
        project(g.tape, y, 17)
    })
}

fn store_of(seed: u64, init: impl FnOnce(&mut Init)) -> ParamStore {
    let mut store = ParamStore::new();
    init(&mut Init::new(seed, &mut store));
    store
}

/// Named layer-level gradient checks.
pub const LAYER_CHECKS: [&str; 11] = [
    "recurrence",
    "selective_scan",
    "s4_block",
    "mamba_block",
    "mhsa",
    "esm",
    "external_attention",
    "unet_depth1",
    "macaron_mhsa",
    "macaron_mamba",
    "full_model",
];

pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        n_channels: 3,
        n_mel: 2,
        d_model: 8,
        n_heads: 2,
        n_subjects: 2,
        pe_max_len: 320,
        unet: UNetConfig {
            depth: 1,
            base_width: 8,
            n_s4_blocks: 1,
            state_size: 2,
        },
        ext_slots: 3,
        n_blocks: 2,
        mamba: MambaConfig {
            expand: 2,
            state_size: 2,
            conv_width: 3,
        },
        ffn_mult: 2,
        conv_kernel: 3,
        ..ModelConfig::default()
    }
}

pub fn layer_grad_check(name: &str, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = Rng::keyed(seed, name);
    let attn = AttentionConfig::new(4, 2)?;
    let block_cfg = BlockConfig {
        attention: attn,
        mamba: MambaConfig {
            expand: 2,
            state_size: 3,
            conv_width: 3,
        },
        ffn_mult: 2,
        conv_kernel: 3,
    };
    match name {
        "recurrence" => {
            let disc = random_stable_ssm(&mut rng, 2, 3);
            let inputs = vec![disc.a_bar, disc.b_bar, disc.c, disc.d, randn(&mut rng, &[16, 2])];
            grad_check(&inputs, opts, |t, v| {
                let y = ssm::recurrence_var(t, v[0], v[1], v[2], v[3], v[4])?;
                project(t, y, seed)
            })
        }
        "selective_scan" => {
            let (h, n, r) = (3, 2, 2);
            let inputs = vec![
                randn(&mut rng, &[h, r + 2 * n]).map(|v| 0.5 * v),
                randn(&mut rng, &[r + 2 * n]),
                randn(&mut rng, &[r, h]),
                uniform(&mut rng, &[h], -2.0, 0.0),
                uniform(&mut rng, &[h, n], -1.0, 1.0),
                randn(&mut rng, &[h]),
                randn(&mut rng, &[16, h]),
            ];
            grad_check(&inputs, opts, |t, v| {
                let p = ssm::SelectiveVars {
                    x_proj_w: v[0],
                    x_proj_b: v[1],
                    dt_proj_w: v[2],
                    dt_bias: v[3],
                    a_log: v[4],
                    d: v[5],
                };
                let y = ssm::selective_scan_var(t, &p, v[6])?;
                project(t, y, seed)
            })
        }
        "s4_block" => {
            let block = S4Block::new("b", 4, 3);
            let store = store_of(seed, |i| block.init(i));
            module_grad_check(&store, randn(&mut rng, &[16, 4]), opts, |g, x| block.forward(g, x))
        }
        "mamba_block" => {
            let block = MambaBlock::new("m", 4, block_cfg.mamba);
            let store = store_of(seed, |i| block.init(i));
            module_grad_check(&store, randn(&mut rng, &[8, 4]), opts, |g, x| block.forward(g, x))
        }
        "mhsa" => {
            let m = MultiHeadAttention::new("a", attn);
            let store = store_of(seed, |i| m.init(i));
            module_grad_check(&store, randn(&mut rng, &[6, 4]), opts, |g, x| m.forward(g, x, x, x))
        }
        "esm" => {
            let esm = Esm::new("e", attn, 3, 2);
            let store = store_of(seed, |i| esm.init(i));
            module_grad_check(&store, randn(&mut rng, &[6, 4]), opts, |g, x| esm.forward(g, x, 1))
        }
        "external_attention" => {
            let ext = ExternalAttention::new("x", 4, 3);
            let store = store_of(seed, |i| ext.init(i));
            module_grad_check(&store, randn(&mut rng, &[6, 4]), opts, |g, x| ext.forward(g, x))
        }
        "unet_depth1" => {
            let cfg = UNetConfig {
                depth: 1,
                base_width: 3,
                n_s4_blocks: 1,
                state_size: 2,
            };
            let unet = S4UNet::new("u", 3, cfg)?;
            let store = store_of(seed, |i| unet.init(i));
            module_grad_check(&store, randn(&mut rng, &[16, 3]), opts, |g, x| unet.forward(g, x))
        }
        "macaron_mhsa" | "macaron_mamba" => {
            let kind = if name == "macaron_mhsa" { MixerKind::Mhsa } else { MixerKind::Mamba };
            let block = MacaronBlock::new("blk", kind, &block_cfg);
            let store = store_of(seed, |i| block.init(i));
            module_grad_check(&store, randn(&mut rng, &[8, 4]), opts, |g, x| block.forward(g, x))
        }
        "full_model" => {
            let cfg = small_model_config();
            let model = Model::new(&cfg)?;
            let store = model.init(seed);
            let names: Vec<String> = store.paths().cloned().collect();
            let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
            let target = randn(&mut rng, &[16, cfg.n_mel]);
            inputs.push(randn(&mut rng, &[16, cfg.n_channels]));
            let n = names.len();
            grad_check(&inputs, opts, |tape, vars| {
                let y = tape.constant(target.clone());
                let mut g = Graph::from_vars(tape, &names, &vars[..n]);
                let pred = model.forward(&mut g, vars[n], 1)?;
                loss_var(g.tape, pred, y, cfg.alpha)
            })
        }
        other => Err(crate::error::Error::Config(format!("unknown layer check `{other}`"))),
    }
}

/// Independent covariance-based Pearson oracle.
pub fn pearson_oracle(p: &Tensor, y: &Tensor) -> f64 {
    let (t, m) = (p.shape()[0], p.shape()[1]);
    let mut acc = 0.0;
    for j in 0..m {
        let a: Vec<f64> = (0..t).map(|i| p.at(&[i, j])).collect();
        let b: Vec<f64> = (0..t).map(|i| y.at(&[i, j])).collect();
        let n = t as f64;
        let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
        let sab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let saa: f64 = a.iter().map(|x| x * x).sum();
        let sbb: f64 = b.iter().map(|x| x * x).sum();
        let cov = sab / n - sa * sb / n / n;
        let va = saa / n - sa * sa / n / n;
        let vb = sbb / n - sb * sb / n / n;
        if va > 0.0 && vb > 0.0 {
            acc += cov / (va * vb).sqrt();
        }
    }
    acc / m as f64
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn record(out: &mut Vec<CheckResult>, name: String, outcome: Result<(bool, String)>) {
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    out.push(CheckResult { name, passed, detail });
}

fn report_detail(r: &GradCheckReport) -> (bool, String) {
    (r.passed(), format!("max rel err {:.2e} over {} coords", r.max_rel_err, r.checked))
}

/// Runs every check. `fault` corrupts the backward rule of one op kind in all
/// gradient checks, which must then be reported as failing.
pub fn run(fault: Option<OpKind>) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut op_opts = GradCheckOptions::new(1e-6, 1e-5);
    op_opts.fault = fault;
    for kind in OpKind::ALL {
        for seed in 0..3 {
            record(
                &mut out,
                format!("grad/op/{}/seed{seed}", kind.name()),
                op_grad_check(kind, seed, &op_opts).map(|r| report_detail(&r)),
            );
        }
    }
    let mut layer_opts = GradCheckOptions::new(1e-5, 1e-4);
    layer_opts.fault = fault;
    for name in LAYER_CHECKS {
        record(
            &mut out,
            format!("grad/layer/{name}"),
            layer_grad_check(name, 1, &layer_opts).map(|r| report_detail(&r)),
        );
    }

    record(&mut out, "ssm/equivalence".into(), (|| {
        let mut rng = Rng::new(101);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let (h, n, t) = (1 + rng.below(4), 1 + rng.below(8), 1 + rng.below(256));
            let disc = random_stable_ssm(&mut rng, h, n);
            let x = randn(&mut rng, &[t, h]);
            let r = ssm::recurrence(&disc, &x)?;
            let c = ssm::convolve(&disc, &x)?;
            let p = ssm::parallel_scan(&disc, &x)?;
            worst = worst.max(r.max_abs_diff(&c)).max(r.max_abs_diff(&p)).max(c.max_abs_diff(&p));
        }
        Ok((worst < 1e-10, format!("max abs deviation {worst:.2e}")))
    })());

    record(&mut out, "ssm/selective_degeneration".into(), (|| {
        let mut worst = 0.0f64;
        for seed in 0..10 {
            let mut rng = Rng::new(200 + seed);
            let (params, disc) = frozen_selective(&mut rng, 3, 4, 2);
            let x = randn(&mut rng, &[40, 3]);
            worst = worst.max(ssm::selective_scan(&params, &x)?.max_abs_diff(&ssm::recurrence(&disc, &x)?));
        }
        Ok((worst < 1e-12, format!("max abs deviation {worst:.2e}")))
    })());

    record(&mut out, "metric/pearson_oracle".into(), (|| {
        let mut rng = Rng::new(300);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let t = 2 + rng.below(60);
            let m = 1 + rng.below(5);
            let p = randn(&mut rng, &[t, m]);
            let y = randn(&mut rng, &[t, m]);
            worst = worst.max((pearson_r(&p, &y)? - pearson_oracle(&p, &y)).abs());
        }
        Ok((worst < 1e-12, format!("max deviation {worst:.2e}")))
    })());

    record(&mut out, "format/round_trip".into(), (|| {
        let mut rng = Rng::new(400);
        let t = randn(&mut rng, &[3, 5, 2]);
        let back = decode(&encode(&t, Dtype::F64)).map_err(|k| crate::error::Error::Invalid {
            op: "decode",
            msg: k.to_string(),
        })?;
        let exact = back.shape() == t.shape() && back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        Ok((exact, "f64 payload bit-exact".into()))
    })());

    record(&mut out, "data/segmentation".into(), Ok({
        let ok = (1..=1000).all(|t| {
            let segs = inference_segments(t, 320);
            segs.iter().all(|&(_, l)| l > 0)
                && segs.windows(2).all(|w| w[0].0 + w[0].1 == w[1].0)
                && segs[0].0 == 0
                && segs.last().map(|&(s, l)| s + l) == Some(t)
        });
        (ok, "T = 1..1000".into())
    }));

    record(&mut out, "train/lr_schedule".into(), Ok({
        let ok = lr_at_epoch(0) == 0.0005
            && (lr_at_epoch(50) - 0.00045).abs() < 1e-15
            && (lr_at_epoch(100) - 0.000405).abs() < 1e-15;
        (ok, "epochs 0, 50, 100".into())
    }));
    out
}

/// Runs the suite and reports timing alongside the results.
pub fn run_timed(fault: Option<OpKind>) -> (Vec<CheckResult>, std::time::Duration) {
    let start = Instant::now();
    let r = run(fault);
    (r, start.elapsed())
}
