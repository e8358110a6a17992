use std::fs;
use std::path::Path;

use eegmel::config::RunConfig;
use eegmel::data::{split_dataset, synth_generate, Recording, Split, SyntheticSpec, SPLIT_RATIOS};
use eegmel::model::{Model, ModelConfig};
use eegmel::train::{evaluate, train_loop, Checkpoint, Trainer};

fn tiny_data(recordings_per_subject: usize) -> Split<Recording> {
    let spec = SyntheticSpec {
        seed: 5,
        n_subjects: 2,
        recordings_per_subject,
        n_samples: 96,
        n_channels: 6,
        n_mel: 3,
        smooth_width: 3,
        ..SyntheticSpec::default()
    };
    split_dataset(synth_generate(&spec).unwrap(), SPLIT_RATIOS, spec.seed).unwrap()
}

fn tiny_config(epochs: usize) -> RunConfig {
    let mut c = RunConfig::default();
    let m = &mut c.model;
    m.n_channels = 6;
    m.n_mel = 3;
    m.d_model = 8;
    m.n_heads = 2;
    m.n_subjects = 2;
    m.sample_rate = 8;
    m.segment_seconds = 4;
    m.unet.depth = 1;
    m.unet.base_width = 8;
    m.unet.n_s4_blocks = 1;
    m.unet.state_size = 4;
    m.ext_slots = 4;
    m.n_blocks = 2;
    m.mamba.state_size = 4;
    m.ffn_mult = 2;
    m.conv_kernel = 3;
    c.train.epochs = epochs;
    c.train.batch_size = 4;
    c.seed = 11;
    c
}

fn files_under(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn zero_epochs_returns_the_initialisation() {
    let data = tiny_data(3);
    let cfg = tiny_config(0);
    let out = train_loop(&cfg, &data.train, &data.val, |_| panic!("no epochs expected")).unwrap();
    let init = Model::new(&cfg.model).unwrap().init(cfg.seed);
    assert!(out.metrics.is_empty());
    assert_eq!(out.best.params, init);
    assert_eq!(out.last.params, init);
    assert_eq!((out.best.epoch, out.last.adam.t), (0, 0));
}

#[test]
fn training_loss_drops_below_initial_loss() {
    let data = tiny_data(4);
    let mut cfg = tiny_config(50);
    cfg.train.batch_size = data.train.len();
    cfg.train.schedule.base = 0.003;
    let out = train_loop(&cfg, &data.train, &data.val, |_| {}).unwrap();
    let initial = out.metrics[0].train_loss;
    let best = out.metrics.iter().map(|m| m.train_loss).fold(f64::INFINITY, f64::min);
    assert!(best < initial, "initial {initial}, best {best}");
    assert!(out.best.best_val >= out.metrics.iter().map(|m| m.val_pearson).fold(f64::NEG_INFINITY, f64::max));
}

#[test]
fn identical_runs_write_identical_checkpoints() {
    let data = tiny_data(3);
    let mut cfg = tiny_config(3);
    cfg.model.dropout = 0.1;
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = train_loop(&cfg, &data.train, &data.val, |_| {}).unwrap();
        out.best.save(&dir.path().join(name).join("best")).unwrap();
        out.last.save(&dir.path().join(name).join("last")).unwrap();
    }
    let (a, b) = (files_under(&dir.path().join("a")), files_under(&dir.path().join("b")));
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let data = tiny_data(3);
    let out = train_loop(&tiny_config(2), &data.train, &data.val, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.last.save(&dir.path().join("one")).unwrap();
    let loaded = Checkpoint::load(&dir.path().join("one")).unwrap();
    assert_eq!(loaded, out.last);
    loaded.save(&dir.path().join("two")).unwrap();
    assert_eq!(files_under(&dir.path().join("one")), files_under(&dir.path().join("two")));
    let manifest = fs::read_to_string(dir.path().join("one/manifest.txt")).unwrap();
    let paths: Vec<&str> = manifest.lines().collect();
    let mut sorted = paths.clone();
    sorted.sort();
    assert_eq!(paths, sorted);
    assert_eq!(paths.len(), out.last.params.len());
}

#[test]
fn resumed_training_follows_the_same_trajectory() {
    let data = tiny_data(3);
    let mut cfg = tiny_config(4);
    cfg.model.dropout = 0.2;
    let straight = train_loop(&cfg, &data.train, &data.val, |_| {}).unwrap();

    let mut first = Trainer::new(&cfg, &data.val).unwrap();
    for _ in 0..2 {
        first.run_epoch(&data.train, &data.val).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    first.checkpoint().save(dir.path()).unwrap();
    let mut resumed = Trainer::resume(&Checkpoint::load(dir.path()).unwrap()).unwrap();
    for _ in 0..2 {
        resumed.run_epoch(&data.train, &data.val).unwrap();
    }
    assert_eq!(resumed.checkpoint().params, straight.last.params);
    assert_eq!(resumed.checkpoint().adam, straight.last.adam);
    assert_eq!(resumed.epoch, 4);
}

#[test]
fn untrained_model_scores_near_zero() {
    let spec = SyntheticSpec {
        seed: 21,
        n_subjects: 2,
        recordings_per_subject: 6,
        n_samples: 640,
        ..SyntheticSpec::default()
    };
    let recs = synth_generate(&spec).unwrap();
    let mut cfg = ModelConfig {
        n_subjects: 2,
        d_model: 16,
        n_blocks: 2,
        ..ModelConfig::default()
    };
    cfg.unet.depth = 1;
    cfg.unet.base_width = 16;
    let model = Model::new(&cfg).unwrap();
    let report = evaluate(&model, &model.init(3), &recs).unwrap();
    assert_eq!(report.per_recording.len(), 12);
    assert!(report.mean.abs() < 0.2, "mean {}", report.mean);
}

#[test]
fn evaluation_needs_recordings() {
    let cfg = tiny_config(1);
    let model = Model::new(&cfg.model).unwrap();
    assert!(evaluate(&model, &model.init(0), &[]).is_err());
}

/// Parameter count of the default architecture, tallied layer by layer.
fn default_param_count(c: &ModelConfig) -> usize {
    let d = c.d_model;
    let linear = |i: usize, o: usize| i * o + o;
    let norm = |w: usize| 2 * w;
    let ffn = |w: usize| linear(w, c.ffn_mult * w) + linear(c.ffn_mult * w, w);
    let mhsa = 4 * linear(d, d);

    let mut n = linear(c.n_channels, d) + 1;
    n += c.n_subjects * d + mhsa + 2 * norm(d) + ffn(d);
    for l in 0..c.unet.depth {
        let w = d << l;
        n += 2 * w * w * 4 + 2 * w;
        n += 2 * w * w * 4 + w;
    }
    let wb = d << c.unet.depth;
    let s4 = 3 * wb * c.unet.state_size + 2 * wb;
    n += c.unet.n_s4_blocks * (norm(wb) + s4 + linear(wb, wb));
    n += 2 * c.ext_slots * d;

    let e = c.mamba.expand * d;
    let (r, sn) = (d.div_ceil(16), c.mamba.state_size);
    let mamba = 2 * linear(d, e)
        + linear(e, d)
        + e * c.mamba.conv_width
        + e
        + linear(e, r + 2 * sn)
        + r * e
        + e
        + e * sn
        + e;
    let conv = linear(d, 2 * d) + d * c.conv_kernel + d + norm(d) + linear(d, d);
    let shared = 5 * norm(d) + 2 * ffn(d) + conv;
    for i in 0..c.n_blocks {
        n += shared + if i % 2 == 0 { mhsa } else { mamba };
    }
    n + linear(d, c.n_mel)
}

#[test]
fn default_parameter_count() {
    let cfg = ModelConfig::default();
    let params = Model::new(&cfg).unwrap().init(0);
    assert_eq!(params.num_scalars(), default_param_count(&cfg));
    assert_eq!(params.num_scalars(), 975_955);
}
