use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eegmel::config::RunConfig;
use eegmel::data::{load_split, split_dir, synth_to_dir, write_tensor, Recording, SyntheticSpec};
use eegmel::error::Error;
use eegmel::model::{pearson_r, Model};
use eegmel::numerics::OpKind;
use eegmel::selftest;
use eegmel::train::{predict_recording, Checkpoint, EpochMetrics, Trainer};

const EXIT_SELFTEST: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_DATA: u8 = 5;

#[derive(Parser)]
#[command(name = "eegmel", version, about = "EEG to mel-spectrogram regression with state-space models")]
struct Cli {
    /// Worker threads for crop gradients and evaluation (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes best/, final/ and metrics.tsv under --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `data_dir` from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on one split; writes report.txt into the checkpoint directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for predicted mel tensors, one `<recording>.ssmt` per recording.
        #[arg(long)]
        dump_pred: Option<PathBuf>,
    },
    /// Run the built-in verification suite.
    Selftest {
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_USAGE,
            Error::Io { .. } => EXIT_IO,
            Error::NonFinite { .. } | Error::NonFiniteGradient { .. } => EXIT_NUMERIC,
            Error::Shape { .. }
            | Error::Invalid { .. }
            | Error::NonScalarLoss(_)
            | Error::UnknownParameter(_)
            | Error::UnknownSubject { .. }
            | Error::TensorFile { .. }
            | Error::Dataset(_) => EXIT_DATA,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn fail(code: u8, msg: impl Into<String>) -> Failure {
    Failure { code, msg: msg.into() }
}

type CmdResult = Result<(), Failure>;

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    })
}

fn print_config(title: &str, body: &str) {
    println!("# {title}");
    print!("{body}");
    println!();
}

fn cmd_synth(spec: &Path, out: &Path) -> CmdResult {
    let spec = SyntheticSpec::load(spec).map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    print_config("synthetic spec", &spec.render());
    let split = synth_to_dir(&spec, out)?;
    println!(
        "wrote {} recordings to {} (train {}, val {}, test {})",
        split.train.len() + split.val.len() + split.test.len(),
        out.display(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

/// Loads a split, treating a missing directory like an empty split.
fn load_nonempty(root: &Path, split: &str) -> Result<Vec<Recording>, Failure> {
    let recs = if split_dir(root, split).is_dir() {
        load_split(root, split)?
    } else {
        Vec::new()
    };
    if recs.is_empty() {
        return Err(fail(
            EXIT_DATA,
            format!("split `{split}` under {} has no recordings", root.display()),
        ));
    }
    Ok(recs)
}

fn check_dims(model: &Model, recs: &[Recording]) -> CmdResult {
    let (c, m) = (model.cfg.n_channels, model.cfg.n_mel);
    for r in recs {
        if r.eeg.shape()[1] != c || r.mel.shape()[1] != m {
            return Err(fail(
                EXIT_DATA,
                format!(
                    "recording {}: eeg {:?} and mel {:?} do not match the model's [T, {c}] and [T, {m}]",
                    r.recording_id,
                    r.eeg.shape(),
                    r.mel.shape()
                ),
            ));
        }
        if r.subject_id >= model.cfg.n_subjects {
            return Err(Error::UnknownSubject {
                id: r.subject_id,
                n_subjects: model.cfg.n_subjects,
            }
            .into());
        }
    }
    Ok(())
}

fn cmd_train(config: &Path, data: Option<&Path>, out: Option<&Path>) -> CmdResult {
    let mut cfg = RunConfig::load(config).map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    if let Some(d) = data {
        cfg.data_dir = d.display().to_string();
    }
    if let Some(o) = out {
        cfg.out_dir = o.display().to_string();
    }
    cfg.validate().map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    print_config("run config", &cfg.render());

    let root = PathBuf::from(&cfg.data_dir);
    let train = load_nonempty(&root, &cfg.train.train_split)?;
    let val = load_nonempty(&root, &cfg.train.val_split)?;
    let out = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out).map_err(|e| Error::Io {
        context: format!("creating {}", out.display()),
        source: e,
    })?;

    let mut trainer = Trainer::new(&cfg, &val)?;
    check_dims(&trainer.model, &train)?;
    check_dims(&trainer.model, &val)?;
    println!("{} parameters", trainer.params.num_scalars());

    let metrics_path = out.join("metrics.tsv");
    let mut log = format!("{}\n", EpochMetrics::HEADER);
    write_file(&metrics_path, &log)?;
    println!("{}", EpochMetrics::HEADER);
    for _ in 0..cfg.train.epochs {
        let m = trainer.run_epoch(&train, &val)?;
        let line = m.line();
        println!("{line}");
        let _ = writeln!(log, "{line}");
        write_file(&metrics_path, &log)?;
    }
    trainer.best.save(&out.join("best"))?;
    trainer.checkpoint().save(&out.join("final"))?;
    println!(
        "best val pearson {} after epoch {}; checkpoints in {}",
        trainer.best.best_val,
        trainer.best.epoch,
        out.display()
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, split: &str, dump: Option<&Path>) -> CmdResult {
    let ck = Checkpoint::load(checkpoint)?;
    print_config("checkpoint config", &ck.config.render());
    let model = Model::new(&ck.config.model)?;
    let recs = load_nonempty(data, split)?;
    check_dims(&model, &recs)?;
    if let Some(d) = dump {
        fs::create_dir_all(d).map_err(|e| Error::Io {
            context: format!("creating {}", d.display()),
            source: e,
        })?;
    }

    let results = {
        use rayon::prelude::*;
        recs.par_iter()
            .map(|r| {
                let pred = predict_recording(&model, &ck.params, &r.eeg, r.subject_id)?;
                let score = pearson_r(&pred, &r.mel)?;
                Ok((pred, score))
            })
            .collect::<Result<Vec<_>, Error>>()?
    };

    let mut report = String::from("recording\tpearson\n");
    for (r, (pred, score)) in recs.iter().zip(&results) {
        let _ = writeln!(report, "{}\t{score}", r.recording_id);
        if let Some(d) = dump {
            write_tensor(&d.join(format!("{}.ssmt", r.recording_id)), pred)?;
        }
    }
    let mean = results.iter().map(|(_, s)| s).sum::<f64>() / results.len() as f64;
    let _ = writeln!(report, "mean\t{mean}");
    print!("{report}");
    write_file(&checkpoint.join("report.txt"), &report)?;
    Ok(())
}

fn cmd_selftest(corrupt: Option<&str>) -> CmdResult {
    let fault = match corrupt {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| fail(EXIT_USAGE, format!("unknown op `{name}`")))?),
        None => None,
    };
    let (results, elapsed) = selftest::run_timed(fault);
    let mut failed = Vec::new();
    for r in &results {
        println!("{} {} ({})", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        if !r.passed {
            failed.push(r.name.as_str());
        }
    }
    println!(
        "{} of {} checks passed in {:.1}s",
        results.len() - failed.len(),
        results.len(),
        elapsed.as_secs_f64()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(fail(EXIT_SELFTEST, format!("failing checks: {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let result = match &cli.command {
        Command::Synth { spec, out } => cmd_synth(spec, out),
        Command::Train { config, data, out } => cmd_train(config, data.as_deref(), out.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            split,
            dump_pred,
        } => cmd_eval(checkpoint, data, split, dump_pred.as_deref()),
        Command::Selftest { corrupt_op } => cmd_selftest(corrupt_op.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
