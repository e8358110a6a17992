//! Optimisation, checkpointing and evaluation.
//!
//! An epoch draws one random crop per training recording in shuffled order and
//! steps Adam once per batch. Crop sampling, shuffling and dropout masks come
//! from streams keyed by `(seed, epoch)`, so a run resumed from a checkpoint
//! follows the same trajectory as an uninterrupted one.

pub mod checkpoint;
pub mod optim;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{inference_segments, random_crop, Recording};
use crate::error::{Error, Result};
use crate::model::{loss_var, pearson_r, Model};
use crate::numerics::{Tape, Tensor};
use crate::params::{Graph, ParamStore};
use crate::rng::Rng;

pub use checkpoint::Checkpoint;
pub use optim::{adam_step, lr_at_epoch, AdamState, LrSchedule};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub train_split: String,
    pub val_split: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            batch_size: 64,
            schedule: LrSchedule::default(),
            grad_clip: 0.0,
            weight_decay: 0.0,
            train_split: "train".into(),
            val_split: "val".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.schedule.period == 0 {
            return Err(Error::Config("lr_step_epochs must be at least 1".into()));
        }
        let s = &self.schedule;
        if !(s.base.is_finite() && s.base >= 0.0 && s.factor.is_finite() && s.factor > 0.0) {
            return Err(Error::Config(format!("invalid learning-rate schedule {s:?}")));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::Config(format!("grad_clip {} must be non-negative", self.grad_clip)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay {} must be non-negative", self.weight_decay)));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_pearson: f64,
}

impl EpochMetrics {
    pub const HEADER: &'static str = "epoch\tlr\ttrain_loss\tval_pearson";

    pub fn line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.epoch, self.lr, self.train_loss, self.val_pearson)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_recording: Vec<(String, f64)>,
    pub mean: f64,
}

/// Segment-and-concatenate prediction over a whole recording.
pub fn predict_recording(model: &Model, params: &ParamStore, eeg: &Tensor, subject: usize) -> Result<Tensor> {
    let segs = inference_segments(eeg.shape()[0], model.cfg.segment_len());
    let parts = segs
        .iter()
        .map(|&(s, len)| model.predict(params, &eeg.rows(s, len)?, subject))
        .collect::<Result<Vec<_>>>()?;
    Tensor::cat_rows(&parts)
}

/// Per-recording Pearson on full recordings and their unweighted mean.
pub fn evaluate(model: &Model, params: &ParamStore, recordings: &[Recording]) -> Result<EvalReport> {
    if recordings.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty set of recordings".into()));
    }
    let per_recording = recordings
        .par_iter()
        .map(|r| {
            let pred = predict_recording(model, params, &r.eeg, r.subject_id)?;
            Ok((r.recording_id.clone(), pearson_r(&pred, &r.mel)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = per_recording.iter().map(|(_, r)| r).sum::<f64>() / per_recording.len() as f64;
    Ok(EvalReport { per_recording, mean })
}

/// Loss and gradients for one crop.
pub fn crop_gradients(
    model: &Model,
    params: &ParamStore,
    eeg: &Tensor,
    mel: &Tensor,
    subject: usize,
    dropout_rng: Rng,
) -> Result<(f64, ParamStore)> {
    let mut tape = Tape::new();
    let mut g = Graph::bind(&mut tape, params, true).with_dropout(model.cfg.dropout, dropout_rng);
    let x = g.tape.constant(eeg.clone());
    let y = g.tape.constant(mel.clone());
    let pred = model.forward(&mut g, x, subject)?;
    let loss = loss_var(g.tape, pred, y, model.cfg.alpha)?;
    let bound = g.bound().clone();
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let mut grads = tape.backward(loss)?;
    let mut out = ParamStore::new();
    for path in params.paths() {
        let v = bound[path];
        out.insert(path.clone(), grads.take(v).expect("trainable leaf has a gradient"));
    }
    Ok((value, out))
}

/// Training progress that can be checkpointed and resumed.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: RunConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    pub epoch: usize,
    pub best: Checkpoint,
}

impl Trainer {
    /// Fresh parameters from the config seed; the initial model, scored on
    /// `val`, is the first best checkpoint.
    pub fn new(config: &RunConfig, val: &[Recording]) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model)?;
        let params = model.init(config.seed);
        let adam = AdamState::new(&params);
        let best_val = evaluate(&model, &params, val)?.mean;
        let best = Checkpoint {
            config: config.clone(),
            params: params.clone(),
            adam: adam.clone(),
            epoch: 0,
            best_val,
        };
        Ok(Trainer {
            model,
            config: config.clone(),
            params,
            adam,
            epoch: 0,
            best,
        })
    }

    /// Continues from a saved checkpoint, treating it as the best so far.
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        Ok(Trainer {
            model: Model::new(&ck.config.model)?,
            config: ck.config.clone(),
            params: ck.params.clone(),
            adam: ck.adam.clone(),
            epoch: ck.epoch,
            best: ck.clone(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            best_val: self.best.best_val,
        }
    }

    fn apply_regularisers(&self, grads: &mut ParamStore) -> Result<()> {
        let tc = &self.config.train;
        if tc.weight_decay > 0.0 {
            for (path, g) in grads.iter_mut() {
                let p = self.params.get(path)?;
                for (gi, pi) in g.data_mut().iter_mut().zip(p.data()) {
                    *gi += tc.weight_decay * pi;
                }
            }
        }
        if tc.grad_clip > 0.0 {
            let norm = grads
                .iter()
                .flat_map(|(_, g)| g.data().iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > tc.grad_clip {
                let s = tc.grad_clip / norm;
                grads.iter_mut().for_each(|(_, g)| g.data_mut().iter_mut().for_each(|v| *v *= s));
            }
        }
        Ok(())
    }

    /// Runs one epoch and scores the result on `val`.
    pub fn run_epoch(&mut self, train: &[Recording], val: &[Recording]) -> Result<EpochMetrics> {
        if train.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        let seed = self.config.seed;
        let epoch = self.epoch;
        let lr = self.config.train.schedule.at(epoch);
        let seg = self.config.model.segment_len();

        let mut rng = Rng::stream(seed, epoch as u64 + 1);
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.shuffle(&mut order);
        let crops = order
            .iter()
            .map(|&i| {
                let (e, m, _) = random_crop(&train[i], seg, &mut rng)?;
                Ok((e, m, train[i].subject_id))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut loss_sum = 0.0;
        for (b, batch) in crops.chunks(self.config.train.batch_size).enumerate() {
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(j, (e, m, s))| {
                    let crop = b * self.config.train.batch_size + j;
                    let dropout_rng = Rng::keyed(seed, &format!("dropout/{epoch}/{crop}"));
                    crop_gradients(&self.model, &self.params, e, m, *s, dropout_rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads = self.params.zeros_like();
            for (l, g) in &results {
                loss_sum += l;
                for ((_, acc), (_, gi)) in grads.iter_mut().zip(g.iter()) {
                    for (a, v) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += scale * v;
                    }
                }
            }
            self.apply_regularisers(&mut grads)?;
            adam_step(&mut self.params, &grads, &mut self.adam, lr)?;
        }

        self.epoch += 1;
        let val_pearson = evaluate(&self.model, &self.params, val)?.mean;
        if !val_pearson.is_finite() {
            return Err(Error::NonFinite { op: "validation" });
        }
        if val_pearson > self.best.best_val {
            self.best = Checkpoint {
                best_val: val_pearson,
                ..self.checkpoint()
            };
        }
        Ok(EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / crops.len() as f64,
            val_pearson,
        })
    }
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains for `config.train.epochs` epochs, calling `on_epoch` after each one.
pub fn train_loop(
    config: &RunConfig,
    train: &[Recording],
    val: &[Recording],
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let mut trainer = Trainer::new(config, val)?;
    let mut metrics = Vec::with_capacity(config.train.epochs);
    for _ in 0..config.train.epochs {
        let m = trainer.run_epoch(train, val)?;
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainOutcome {
        last: trainer.checkpoint(),
        best: trainer.best,
        metrics,
    })
}
