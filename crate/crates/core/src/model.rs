//! The assembled EEG → mel network, its loss and the Pearson metric.
//!
//! ```text
//! eeg ─ linear C→d ─ +PE ─┬─ ESM ─ (+) ─┬─ U-Net ─ external attention ─┐
//!                         └────────────┘ └──────────── (+) ────────────┴─ backbone ─ linear d→M
//! ```

use crate::backbone::{Backbone, BlockConfig, MambaConfig, MixerSchedule};
use crate::error::{Error, Result};
use crate::layers::{AttentionConfig, Esm, ExternalAttention, Linear, PositionalEncoding};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Graph, Init, ParamStore};
use crate::s4unet::{S4UNet, UNetConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_channels: usize,
    pub n_mel: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_subjects: usize,
    pub sample_rate: usize,
    pub segment_seconds: usize,
    pub pe_max_len: usize,
    pub use_esm: bool,
    pub use_s4unet: bool,
    pub use_external_attention: bool,
    pub unet: UNetConfig,
    pub ext_slots: usize,
    pub n_blocks: usize,
    pub mixer: MixerSchedule,
    pub mamba: MambaConfig,
    pub ffn_mult: usize,
    pub conv_kernel: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_channels: 64,
            n_mel: 10,
            d_model: 64,
            n_heads: 4,
            n_subjects: 85,
            sample_rate: 64,
            segment_seconds: 5,
            pe_max_len: 1024,
            use_esm: true,
            use_s4unet: true,
            use_external_attention: true,
            unet: UNetConfig {
                depth: 2,
                base_width: 64,
                n_s4_blocks: 2,
                state_size: 16,
            },
            ext_slots: 64,
            n_blocks: 4,
            mixer: MixerSchedule::Alternate,
            mamba: MambaConfig::default(),
            ffn_mult: 4,
            conv_kernel: 15,
            alpha: 1.0,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// Training crop and inference window length in samples.
    pub fn segment_len(&self) -> usize {
        self.sample_rate * self.segment_seconds
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.d_model, self.n_heads)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_channels", self.n_channels),
            ("n_mel", self.n_mel),
            ("d_model", self.d_model),
            ("n_subjects", self.n_subjects),
            ("sample_rate", self.sample_rate),
            ("segment_seconds", self.segment_seconds),
            ("pe_max_len", self.pe_max_len),
            ("ext_slots", self.ext_slots),
            ("mamba_expand", self.mamba.expand),
            ("mamba_state", self.mamba.state_size),
            ("mamba_conv", self.mamba.conv_width),
            ("ffn_mult", self.ffn_mult),
            ("conv_kernel", self.conv_kernel),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        self.attention()?;
        if self.use_s4unet {
            self.unet.validate()?;
        }
        if self.pe_max_len < self.segment_len() {
            return Err(Error::Config(format!(
                "pe_max_len {} is shorter than the segment length {}",
                self.pe_max_len,
                self.segment_len()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha {} must be finite and non-negative", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub input: Linear,
    pub pos: PositionalEncoding,
    pub esm: Option<Esm>,
    pub unet: Option<S4UNet>,
    pub ext: Option<ExternalAttention>,
    pub backbone: Backbone,
    pub output: Linear,
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let attention = cfg.attention()?;
        let block = BlockConfig {
            attention,
            mamba: cfg.mamba,
            ffn_mult: cfg.ffn_mult,
            conv_kernel: cfg.conv_kernel,
        };
        Ok(Model {
            cfg: cfg.clone(),
            input: Linear::new("input.proj", cfg.n_channels, d),
            pos: PositionalEncoding::new("pos", cfg.pe_max_len, d),
            esm: cfg
                .use_esm
                .then(|| Esm::new("esm", attention, cfg.n_subjects, cfg.ffn_mult)),
            unet: cfg
                .use_s4unet
                .then(|| S4UNet::new("unet", d, cfg.unet))
                .transpose()?,
            ext: cfg
                .use_external_attention
                .then(|| ExternalAttention::new("ext", d, cfg.ext_slots)),
            backbone: Backbone::new("backbone", cfg.n_blocks, cfg.mixer, &block),
            output: Linear::new("output.proj", d, cfg.n_mel),
        })
    }

    /// Fresh parameters; a pure function of `(config, seed)`.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed, &mut store);
        self.input.init(&mut init);
        self.pos.init(&mut init);
        if let Some(e) = &self.esm {
            e.init(&mut init);
        }
        if let Some(u) = &self.unet {
            u.init(&mut init);
        }
        if let Some(x) = &self.ext {
            x.init(&mut init);
        }
        self.backbone.init(&mut init);
        self.output.init(&mut init);
        store
    }

    /// `eeg: [T, C]` → `[T, M]`.
    pub fn forward(&self, g: &mut Graph, eeg: Var, subject: usize) -> Result<Var> {
        let shape = g.tape.shape(eeg);
        if shape.len() != 2 || shape[1] != self.cfg.n_channels || shape[0] == 0 {
            return Err(Error::shape("model_forward", &[shape.first().copied().unwrap_or(0), self.cfg.n_channels], shape));
        }
        if subject >= self.cfg.n_subjects {
            return Err(Error::UnknownSubject {
                id: subject,
                n_subjects: self.cfg.n_subjects,
            });
        }
        let x = self.input.forward(g, eeg)?;
        let p0 = self.pos.forward(g, x)?;
        let esm_raw = match &self.esm {
            Some(e) => {
                let f = e.forward(g, p0, subject)?;
                g.tape.add(p0, f)?
            }
            None => p0,
        };
        let mut pre = esm_raw;
        if let Some(u) = &self.unet {
            pre = u.forward(g, pre)?;
        }
        if let Some(x) = &self.ext {
            pre = x.forward(g, pre)?;
        }
        let z = self.backbone.forward(g, pre, esm_raw)?;
        self.output.forward(g, z)
    }

    /// Inference on plain tensors with frozen parameters.
    pub fn predict(&self, store: &ParamStore, eeg: &Tensor, subject: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut g = Graph::bind(&mut tape, store, false);
        let x = g.tape.constant(eeg.clone());
        let y = self.forward(&mut g, x, subject)?;
        Ok(tape.value(y).clone())
    }
}

fn check_pair(op: &'static str, pred: &[usize], target: &[usize]) -> Result<()> {
    if pred != target || pred.len() != 2 {
        return Err(Error::shape(op, pred, target));
    }
    if pred[0] < 2 {
        return Err(Error::invalid(op, format!("need at least 2 time steps, got {}", pred[0])));
    }
    Ok(())
}

fn constant_bands(x: &Tensor) -> Vec<bool> {
    let (t_len, m) = (x.shape()[0], x.shape()[1]);
    (0..m)
        .map(|j| {
            let first = x.data()[j];
            (1..t_len).all(|t| x.data()[t * m + j] == first)
        })
        .collect()
}

/// Mean over bands of the per-band Pearson correlation; a band where either
/// side is constant contributes 0.
pub fn pearson_r(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_pair("pearson_r", pred.shape(), target.shape())?;
    let (t_len, m) = (pred.shape()[0], pred.shape()[1]);
    let (cp, ct) = (constant_bands(pred), constant_bands(target));
    let (p, y) = (pred.data(), target.data());
    let mut total = 0.0;
    for j in 0..m {
        if cp[j] || ct[j] {
            continue;
        }
        let mp = (0..t_len).map(|t| p[t * m + j]).sum::<f64>() / t_len as f64;
        let my = (0..t_len).map(|t| y[t * m + j]).sum::<f64>() / t_len as f64;
        let (mut cov, mut sp, mut sy) = (0.0, 0.0, 0.0);
        for t in 0..t_len {
            let (a, b) = (p[t * m + j] - mp, y[t * m + j] - my);
            cov += a * b;
            sp += a * a;
            sy += b * b;
        }
        let denom = (sp * sy).sqrt();
        if denom > 0.0 {
            total += cov / denom;
        }
    }
    Ok(total / m as f64)
}

/// Differentiable [`pearson_r`] with respect to `pred`; `target` is treated as data.
pub fn pearson_var(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    check_pair("pearson_r", tape.shape(pred), tape.shape(target))?;
    let m = tape.shape(pred)[1];
    let (cp, ct) = (constant_bands(tape.value(pred)), constant_bands(tape.value(target)));
    let live: Vec<f64> = cp.iter().zip(&ct).map(|(a, b)| if *a || *b { 0.0 } else { 1.0 }).collect();
    let dead: Vec<f64> = live.iter().map(|v| 1.0 - v).collect();
    let live = tape.constant(Tensor::new(vec![1, m], live)?);
    let dead = tape.constant(Tensor::new(vec![1, m], dead)?);

    let mp = tape.mean_axis(pred, 0)?;
    let pc = tape.sub(pred, mp)?;
    let my = tape.mean_axis(target, 0)?;
    let yc = tape.sub(target, my)?;
    let prod = tape.mul(pc, yc)?;
    let cov = tape.sum_axis(prod, 0)?;
    let pp = tape.mul(pc, pc)?;
    let sp = tape.sum_axis(pp, 0)?;
    let yy = tape.mul(yc, yc)?;
    let sy = tape.sum_axis(yy, 0)?;
    let denom2 = tape.mul(sp, sy)?;
    let denom2 = tape.add(denom2, dead)?;
    let denom = tape.sqrt(denom2)?;
    let cov = tape.mul(cov, live)?;
    let r = tape.div(cov, denom)?;
    tape.mean(r)
}

/// `−R + alpha · mean|pred − target|` on the tape.
pub fn loss_var(tape: &mut Tape, pred: Var, target: Var, alpha: f64) -> Result<Var> {
    let r = pearson_var(tape, pred, target)?;
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff)?;
    let l1 = tape.mean(abs)?;
    let l1 = tape.scale(l1, alpha)?;
    tape.sub(l1, r)
}

/// `−R + alpha · mean|pred − target|`.
pub fn loss(pred: &Tensor, target: &Tensor, alpha: f64) -> Result<f64> {
    let r = pearson_r(pred, target)?;
    let l1 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, y)| (p - y).abs())
        .sum::<f64>()
        / pred.numel() as f64;
    Ok(-r + alpha * l1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape).map(|_| rng.normal())
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_channels: 3,
            n_mel: 2,
            d_model: 8,
            n_heads: 2,
            n_subjects: 2,
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
                conv_width: 4,
            },
            ffn_mult: 2,
            conv_kernel: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn pearson_hand_example() {
        let p = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let y = Tensor::new(vec![3, 1], vec![1.0, 2.0, 4.0]).unwrap();
        // cov = 3, |p| = √2, |y| = √(14/3)
        let expected = 3.0 / (2.0f64 * 14.0 / 3.0).sqrt();
        assert!((pearson_r(&p, &y).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.98198).abs() < 1e-5);
    }

    #[test]
    fn pearson_identity_and_negation() {
        let mut rng = Rng::new(3);
        let y = randn(&mut rng, &[20, 4]);
        assert!((pearson_r(&y, &y).unwrap() - 1.0).abs() < 1e-14);
        let neg = y.map(|v| -v);
        assert!((pearson_r(&neg, &y).unwrap() + 1.0).abs() < 1e-14);
    }

    #[test]
    fn constant_band_contributes_zero() {
        let p = Tensor::new(vec![3, 2], vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        let y = Tensor::new(vec![3, 2], vec![1.0, 0.0, 2.0, 1.0, 3.0, 2.0]).unwrap();
        assert!((pearson_r(&p, &y).unwrap() - 0.5).abs() < 1e-15);
        let mut tape = Tape::new();
        let pv = tape.leaf(p, true);
        let yv = tape.constant(y);
        let r = pearson_var(&mut tape, pv, yv).unwrap();
        assert!((tape.value(r).item() - 0.5).abs() < 1e-15);
        let g = tape.backward(r).unwrap();
        assert!(g.get(pv).unwrap().is_finite());
    }

    #[test]
    fn pearson_needs_two_steps() {
        let p = Tensor::zeros(&[1, 2]);
        assert!(pearson_r(&p, &p).is_err());
    }

    #[test]
    fn loss_examples() {
        let mut rng = Rng::new(9);
        let y = randn(&mut rng, &[16, 3]);
        assert!((loss(&y, &y, 0.7).unwrap() + 1.0).abs() < 1e-14);
        let shifted = y.map(|v| v + 1.0);
        assert!((loss(&shifted, &y, 0.3).unwrap() - (-1.0 + 0.3)).abs() < 1e-12);
        let p = randn(&mut rng, &[16, 3]);
        assert_eq!(loss(&p, &y, 0.0).unwrap(), -pearson_r(&p, &y).unwrap());

        let mut tape = Tape::new();
        let pv = tape.constant(p.clone());
        let yv = tape.constant(y.clone());
        let l = loss_var(&mut tape, pv, yv, 0.4).unwrap();
        assert!((tape.value(l).item() - loss(&p, &y, 0.4).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn output_shapes_for_various_lengths() {
        let cfg = tiny();
        let model = Model::new(&cfg).unwrap();
        let store = model.init(1);
        let mut rng = Rng::new(2);
        for t in [1, 5, 319, 320, 321, 640] {
            let eeg = randn(&mut rng, &[t, 3]);
            let y = model.predict(&store, &eeg, 1).unwrap();
            assert_eq!(y.shape(), &[t, 2]);
        }
    }

    #[test]
    fn unknown_subject_rejected() {
        let model = Model::new(&tiny()).unwrap();
        let store = model.init(1);
        let eeg = Tensor::zeros(&[4, 3]);
        assert!(matches!(
            model.predict(&store, &eeg, 2),
            Err(Error::UnknownSubject { id: 2, n_subjects: 2 })
        ));
    }

    #[test]
    fn zero_readout_gives_zero_output() {
        let model = Model::new(&tiny()).unwrap();
        let mut store = model.init(4);
        *store.get_mut("output.proj.weight").unwrap() = Tensor::zeros(&[8, 2]);
        let eeg = Tensor::ones(&[10, 3]);
        let y = model.predict(&store, &eeg, 0).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn all_ablations_off_still_runs() {
        let cfg = ModelConfig {
            use_esm: false,
            use_s4unet: false,
            use_external_attention: false,
            n_blocks: 0,
            ..tiny()
        };
        let model = Model::new(&cfg).unwrap();
        let store = model.init(0);
        assert!(store.paths().all(|p| p.starts_with("input.") || p.starts_with("output.") || p.starts_with("pos.")));
        let y = model.predict(&store, &Tensor::ones(&[6, 3]), 0).unwrap();
        assert_eq!(y.shape(), &[6, 2]);
    }

    #[test]
    fn init_is_a_function_of_seed() {
        let model = Model::new(&tiny()).unwrap();
        assert_eq!(model.init(11), model.init(11));
        assert_ne!(model.init(11), model.init(12));
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad_heads = ModelConfig { n_heads: 3, ..tiny() };
        assert!(matches!(Model::new(&bad_heads), Err(Error::Config(_))));
        let short_pe = ModelConfig { pe_max_len: 100, ..tiny() };
        assert!(Model::new(&short_pe).is_err());
    }
}
