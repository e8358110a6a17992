//! Flat `key=value` configuration files.
//!
//! One entry per line, `#` starts a comment line, blank lines are ignored,
//! whitespace around keys and values is trimmed. Unknown and duplicate keys
//! are errors. [`RunConfig::render`] emits every key, defaults included, and
//! parsing the rendered text yields the same configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::MixerSchedule;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Splits text into ordered `(key, value)` pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if !seen.insert(k.to_string()) {
            return Err(Error::Config(format!("duplicate config key `{k}`")));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for key `{key}`"))),
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Everything a run needs: model, optimisation, paths and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: String,
    pub out_dir: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_dir: String::new(),
            out_dir: String::new(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Every recognised key with a one-line description, in render order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for initialisation, cropping and shuffling"),
    ("data_dir", "dataset root (overridden by --data)"),
    ("out_dir", "output directory (overridden by --out)"),
    ("n_channels", "EEG channels C"),
    ("n_mel", "mel bands M"),
    ("d_model", "model width"),
    ("n_heads", "attention heads; must divide d_model"),
    ("n_subjects", "size of the subject embedding table"),
    ("sample_rate", "samples per second"),
    ("segment_seconds", "crop / inference window length in seconds"),
    ("pe_max_len", "positional table length; at least one segment"),
    ("use_esm", "subject embedding modulator on/off"),
    ("use_s4unet", "S4 U-Net pre-extractor on/off"),
    ("use_external_attention", "external attention on/off"),
    ("unet_depth", "U-Net down/up levels"),
    ("unet_base_width", "U-Net top-level width"),
    ("unet_blocks", "S4 blocks at the U-Net bottleneck"),
    ("s4_state", "S4 state size"),
    ("ext_slots", "external attention memory slots"),
    ("n_blocks", "macaron backbone blocks"),
    ("mixer", "all_mhsa | all_mamba | alternate"),
    ("mamba_expand", "Mamba inner width multiplier"),
    ("mamba_state", "Mamba state size"),
    ("mamba_conv", "Mamba causal depthwise conv width"),
    ("ffn_mult", "feed-forward expansion"),
    ("conv_kernel", "macaron depthwise conv width"),
    ("alpha", "L1 weight in the loss"),
    ("dropout", "dropout probability"),
    ("epochs", "training epochs"),
    ("batch_size", "crops per optimiser step"),
    ("lr", "initial learning rate"),
    ("lr_decay", "learning rate factor per step period"),
    ("lr_step_epochs", "epochs per learning rate step"),
    ("grad_clip", "global gradient norm clip; 0 disables"),
    ("weight_decay", "L2 penalty added to gradients; 0 disables"),
    ("train_split", "split used for training"),
    ("val_split", "split used for model selection"),
];

impl RunConfig {
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let values: Vec<String> = vec![
            self.seed.to_string(),
            self.data_dir.clone(),
            self.out_dir.clone(),
            m.n_channels.to_string(),
            m.n_mel.to_string(),
            m.d_model.to_string(),
            m.n_heads.to_string(),
            m.n_subjects.to_string(),
            m.sample_rate.to_string(),
            m.segment_seconds.to_string(),
            m.pe_max_len.to_string(),
            m.use_esm.to_string(),
            m.use_s4unet.to_string(),
            m.use_external_attention.to_string(),
            m.unet.depth.to_string(),
            m.unet.base_width.to_string(),
            m.unet.n_s4_blocks.to_string(),
            m.unet.state_size.to_string(),
            m.ext_slots.to_string(),
            m.n_blocks.to_string(),
            m.mixer.to_string(),
            m.mamba.expand.to_string(),
            m.mamba.state_size.to_string(),
            m.mamba.conv_width.to_string(),
            m.ffn_mult.to_string(),
            m.conv_kernel.to_string(),
            m.alpha.to_string(),
            m.dropout.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.schedule.base.to_string(),
            t.schedule.factor.to_string(),
            t.schedule.period.to_string(),
            t.grad_clip.to_string(),
            t.weight_decay.to_string(),
            t.train_split.clone(),
            t.val_split.clone(),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut out = String::new();
        for ((k, _), v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "data_dir" => self.data_dir = v.to_string(),
            "out_dir" => self.out_dir = v.to_string(),
            "n_channels" => m.n_channels = parse_value(key, v)?,
            "n_mel" => m.n_mel = parse_value(key, v)?,
            "d_model" => m.d_model = parse_value(key, v)?,
            "n_heads" => m.n_heads = parse_value(key, v)?,
            "n_subjects" => m.n_subjects = parse_value(key, v)?,
            "sample_rate" => m.sample_rate = parse_value(key, v)?,
            "segment_seconds" => m.segment_seconds = parse_value(key, v)?,
            "pe_max_len" => m.pe_max_len = parse_value(key, v)?,
            "use_esm" => m.use_esm = parse_bool(key, v)?,
            "use_s4unet" => m.use_s4unet = parse_bool(key, v)?,
            "use_external_attention" => m.use_external_attention = parse_bool(key, v)?,
            "unet_depth" => m.unet.depth = parse_value(key, v)?,
            "unet_base_width" => m.unet.base_width = parse_value(key, v)?,
            "unet_blocks" => m.unet.n_s4_blocks = parse_value(key, v)?,
            "s4_state" => m.unet.state_size = parse_value(key, v)?,
            "ext_slots" => m.ext_slots = parse_value(key, v)?,
            "n_blocks" => m.n_blocks = parse_value(key, v)?,
            "mixer" => m.mixer = v.parse::<MixerSchedule>()?,
            "mamba_expand" => m.mamba.expand = parse_value(key, v)?,
            "mamba_state" => m.mamba.state_size = parse_value(key, v)?,
            "mamba_conv" => m.mamba.conv_width = parse_value(key, v)?,
            "ffn_mult" => m.ffn_mult = parse_value(key, v)?,
            "conv_kernel" => m.conv_kernel = parse_value(key, v)?,
            "alpha" => m.alpha = parse_value(key, v)?,
            "dropout" => m.dropout = parse_value(key, v)?,
            "epochs" => t.epochs = parse_value(key, v)?,
            "batch_size" => t.batch_size = parse_value(key, v)?,
            "lr" => t.schedule.base = parse_value(key, v)?,
            "lr_decay" => t.schedule.factor = parse_value(key, v)?,
            "lr_step_epochs" => t.schedule.period = parse_value(key, v)?,
            "grad_clip" => t.grad_clip = parse_value(key, v)?,
            "weight_decay" => t.weight_decay = parse_value(key, v)?,
            "train_split" => t.train_split = v.to_string(),
            "val_split" => t.val_split = v.to_string(),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Defaults overridden by the keys present in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}
