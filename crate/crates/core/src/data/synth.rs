//! Seeded synthetic EEG → mel datasets.
//!
//! For subject `s` with mixing matrix `W_s: [C, M]`:
//!
//! ```text
//! eeg = MA_k(g) · √k            g ~ N(0, 1) i.i.d.
//! mel = standardise(MA_k(eeg) · W_s + σ · noise)
//! ```
//!
//! `MA_k` is a causal moving average of width `k`; the generator runs it over a
//! burn-in so every output sample has a full window. Draw order from one
//! xoshiro256++ stream seeded through splitmix64: all `W_s` (subject-major,
//! row-major), then per recording `g` followed by `noise`.

use std::path::Path;

use crate::config::{parse_pairs, parse_value, read_text};
use crate::data::dataset::{split_dataset, write_split, Recording, Split};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_subjects: usize,
    pub recordings_per_subject: usize,
    pub n_samples: usize,
    pub n_channels: usize,
    pub n_mel: usize,
    pub smooth_width: usize,
    pub noise_std: f64,
    pub sample_rate: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            n_subjects: 2,
            recordings_per_subject: 4,
            n_samples: 64 * 60,
            n_channels: 64,
            n_mel: 10,
            smooth_width: 4,
            noise_std: 0.0,
            sample_rate: 64,
        }
    }
}

impl SyntheticSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = SyntheticSpec::default();
        for (k, v) in parse_pairs(text)? {
            match k.as_str() {
                "seed" => s.seed = parse_value(&k, &v)?,
                "n_subjects" => s.n_subjects = parse_value(&k, &v)?,
                "recordings_per_subject" => s.recordings_per_subject = parse_value(&k, &v)?,
                "n_samples" => s.n_samples = parse_value(&k, &v)?,
                "seconds" => s.n_samples = parse_value::<usize>(&k, &v)? * s.sample_rate,
                "n_channels" => s.n_channels = parse_value(&k, &v)?,
                "n_mel" => s.n_mel = parse_value(&k, &v)?,
                "smooth_width" => s.smooth_width = parse_value(&k, &v)?,
                "noise_std" => s.noise_std = parse_value(&k, &v)?,
                "sample_rate" => s.sample_rate = parse_value(&k, &v)?,
                _ => return Err(Error::Config(format!("unknown synth key `{k}`"))),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn render(&self) -> String {
        format!(
            "seed={}\nn_subjects={}\nrecordings_per_subject={}\nn_samples={}\nn_channels={}\nn_mel={}\nsmooth_width={}\nnoise_std={}\nsample_rate={}\n",
            self.seed,
            self.n_subjects,
            self.recordings_per_subject,
            self.n_samples,
            self.n_channels,
            self.n_mel,
            self.smooth_width,
            self.noise_std,
            self.sample_rate
        )
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_subjects", self.n_subjects),
            ("recordings_per_subject", self.recordings_per_subject),
            ("n_samples", self.n_samples),
            ("n_channels", self.n_channels),
            ("n_mel", self.n_mel),
            ("smooth_width", self.smooth_width),
            ("sample_rate", self.sample_rate),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("synth {name} must be at least 1")));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Config(format!("synth noise_std {} must be non-negative", self.noise_std)));
        }
        Ok(())
    }
}

/// Causal moving sum over `width` rows of `x: [T_in, C]`, valid part only: `[T_in − width + 1, C]`.
fn moving_sum(x: &[f64], t_in: usize, c: usize, width: usize) -> Vec<f64> {
    let t_out = t_in + 1 - width;
    let mut out = vec![0.0; t_out * c];
    for t in 0..t_out {
        for j in 0..width {
            let src = &x[(t + j) * c..(t + j + 1) * c];
            for (o, s) in out[t * c..(t + 1) * c].iter_mut().zip(src) {
                *o += s;
            }
        }
    }
    out
}

pub fn recording_id(subject: usize, rec: usize) -> String {
    format!("s{subject:02}_r{rec:02}")
}

pub fn synth_generate(spec: &SyntheticSpec) -> Result<Vec<Recording>> {
    spec.validate()?;
    let (c, m, t, k) = (spec.n_channels, spec.n_mel, spec.n_samples, spec.smooth_width);
    let mut rng = Rng::new(spec.seed);
    let w_scale = 1.0 / (c as f64).sqrt();
    let mixes: Vec<Vec<f64>> = (0..spec.n_subjects)
        .map(|_| (0..c * m).map(|_| rng.normal() * w_scale).collect())
        .collect();

    let raw_len = t + 2 * (k - 1);
    let mut out = Vec::with_capacity(spec.n_subjects * spec.recordings_per_subject);
    for (s, w) in mixes.iter().enumerate() {
        for r in 0..spec.recordings_per_subject {
            let g: Vec<f64> = (0..raw_len * c).map(|_| rng.normal()).collect();
            let noise: Vec<f64> = (0..t * m).map(|_| rng.normal()).collect();

            let eeg_full: Vec<f64> = moving_sum(&g, raw_len, c, k)
                .into_iter()
                .map(|v| v / (k as f64).sqrt())
                .collect();
            let smooth: Vec<f64> = moving_sum(&eeg_full, t + k - 1, c, k)
                .into_iter()
                .map(|v| v / k as f64)
                .collect();
            let eeg = eeg_full[(k - 1) * c..].to_vec();

            let mut mel = vec![0.0; t * m];
            for ti in 0..t {
                for (ci, sv) in smooth[ti * c..(ti + 1) * c].iter().enumerate() {
                    for mi in 0..m {
                        mel[ti * m + mi] += sv * w[ci * m + mi];
                    }
                }
                for mi in 0..m {
                    mel[ti * m + mi] += spec.noise_std * noise[ti * m + mi];
                }
            }
            standardise_columns(&mut mel, t, m);

            out.push(Recording::new(
                Tensor::new(vec![t, c], eeg)?,
                Tensor::new(vec![t, m], mel)?,
                s,
                recording_id(s, r),
            )?);
        }
    }
    Ok(out)
}

fn standardise_columns(x: &mut [f64], t: usize, m: usize) {
    for j in 0..m {
        let mean = (0..t).map(|i| x[i * m + j]).sum::<f64>() / t as f64;
        let var = (0..t).map(|i| (x[i * m + j] - mean).powi(2)).sum::<f64>() / t as f64;
        let sd = var.sqrt();
        for i in 0..t {
            let v = x[i * m + j] - mean;
            x[i * m + j] = if sd > 0.0 { v / sd } else { v };
        }
    }
}

pub const SPLIT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);

/// Generates, splits with `spec.seed` and writes `train`, `val` and `test` under `root`.
pub fn synth_to_dir(spec: &SyntheticSpec, root: &Path) -> Result<Split<Recording>> {
    let split = split_dataset(synth_generate(spec)?, SPLIT_RATIOS, spec.seed)?;
    write_split(root, "train", &split.train, spec.sample_rate)?;
    write_split(root, "val", &split.val, spec.sample_rate)?;
    write_split(root, "test", &split.test, spec.sample_rate)?;
    Ok(split)
}
