//! Recordings, splits, cropping and segmentation, plus the on-disk layout
//! `<root>/<split>/<recording_id>/{eeg.ssmt, mel.ssmt, meta.txt}`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{parse_pairs, parse_value, read_text};
use crate::data::tensor_file::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub eeg: Tensor,
    pub mel: Tensor,
    pub subject_id: usize,
    pub recording_id: String,
}

impl Recording {
    pub fn new(eeg: Tensor, mel: Tensor, subject_id: usize, recording_id: impl Into<String>) -> Result<Self> {
        if eeg.rank() != 2 || mel.rank() != 2 || eeg.shape()[0] != mel.shape()[0] {
            return Err(Error::shape("recording", eeg.shape(), mel.shape()));
        }
        Ok(Recording {
            eeg,
            mel,
            subject_id,
            recording_id: recording_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.eeg.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then `val = max(1, ⌊r_val·n⌋)`, `test = max(1, ⌊r_test·n⌋)`
/// and the rest to training. Each part keeps the input order.
pub fn split_dataset<T>(items: Vec<T>, ratios: (f64, f64, f64), seed: u64) -> Result<Split<T>> {
    let n = items.len();
    if n < 3 {
        return Err(Error::Dataset(format!("need at least 3 recordings to split, got {n}")));
    }
    let (_, r_val, r_test) = ratios;
    let part = |r: f64| ((r * n as f64 + 1e-9).floor() as usize).max(1);
    let (n_val, n_test) = (part(r_val), part(r_test));
    if n_val + n_test >= n {
        return Err(Error::Dataset(format!("ratios {ratios:?} leave no training data for {n} recordings")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let mut role = vec![0u8; n];
    order[..n_val].iter().for_each(|&i| role[i] = 1);
    order[n_val..n_val + n_test].iter().for_each(|&i| role[i] = 2);
    let mut split = Split {
        train: Vec::with_capacity(n - n_val - n_test),
        val: Vec::with_capacity(n_val),
        test: Vec::with_capacity(n_test),
    };
    for (item, r) in items.into_iter().zip(role) {
        match r {
            1 => split.val.push(item),
            2 => split.test.push(item),
            _ => split.train.push(item),
        }
    }
    Ok(split)
}

/// Paired crop of `len` samples at a uniform random offset shared by both signals.
pub fn random_crop(rec: &Recording, len: usize, rng: &mut Rng) -> Result<(Tensor, Tensor, usize)> {
    let t_len = rec.len();
    if t_len < len {
        return Err(Error::Dataset(format!(
            "recording {} has {t_len} samples, shorter than the crop length {len}",
            rec.recording_id
        )));
    }
    let start = rng.below(t_len - len + 1);
    Ok((rec.eeg.rows(start, len)?, rec.mel.rows(start, len)?, start))
}

/// Consecutive `(start, length)` windows of `segment` samples covering `[0, t_len)`;
/// the last window is shorter when `segment` does not divide `t_len`.
pub fn inference_segments(t_len: usize, segment: usize) -> Vec<(usize, usize)> {
    assert!(segment > 0, "segment length must be positive");
    (0..t_len)
        .step_by(segment)
        .map(|s| (s, segment.min(t_len - s)))
        .collect()
}

pub const EEG_FILE: &str = "eeg.ssmt";
pub const MEL_FILE: &str = "mel.ssmt";
pub const META_FILE: &str = "meta.txt";

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

pub fn write_recording(dir: &Path, rec: &Recording, sample_rate: usize) -> Result<()> {
    mkdir(dir)?;
    write_tensor(&dir.join(EEG_FILE), &rec.eeg)?;
    write_tensor(&dir.join(MEL_FILE), &rec.mel)?;
    let meta = format!("subject_id={}\nsample_rate={sample_rate}\n", rec.subject_id);
    fs::write(dir.join(META_FILE), meta).map_err(|e| Error::io(format!("writing {}", dir.join(META_FILE).display()), e))
}

pub fn read_recording(dir: &Path) -> Result<(Recording, usize)> {
    let id = dir
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Dataset(format!("bad recording directory {}", dir.display())))?
        .to_string();
    let (mut subject, mut rate) = (None, None);
    for (k, v) in parse_pairs(&read_text(&dir.join(META_FILE))?)? {
        match k.as_str() {
            "subject_id" => subject = Some(parse_value::<usize>(&k, &v)?),
            "sample_rate" => rate = Some(parse_value::<usize>(&k, &v)?),
            _ => {}
        }
    }
    let subject = subject.ok_or_else(|| Error::Dataset(format!("{}: meta.txt lacks subject_id", dir.display())))?;
    let rate = rate.ok_or_else(|| Error::Dataset(format!("{}: meta.txt lacks sample_rate", dir.display())))?;
    let eeg = read_tensor(&dir.join(EEG_FILE))?;
    let mel = read_tensor(&dir.join(MEL_FILE))?;
    let rec = Recording::new(eeg, mel, subject, id).map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))?;
    Ok((rec, rate))
}

pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}

pub fn write_split(root: &Path, split: &str, recs: &[Recording], sample_rate: usize) -> Result<()> {
    let dir = split_dir(root, split);
    mkdir(&dir)?;
    recs.iter()
        .try_for_each(|r| write_recording(&dir.join(&r.recording_id), r, sample_rate))
}

/// All recordings of a split, ordered by recording id.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<Recording>> {
    let dir = split_dir(root, split);
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut dirs = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
        if e.path().is_dir() {
            dirs.push(e.path());
        }
    }
    dirs.sort();
    dirs.iter().map(|d| read_recording(d).map(|(r, _)| r)).collect()
}
