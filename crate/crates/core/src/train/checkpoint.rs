//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.txt        one parameter path per line, lexicographic
//! <dir>/config.txt          rendered run configuration
//! <dir>/state.txt           epoch, best_val, adam_t
//! <dir>/params/<path>.ssmt
//! <dir>/adam_m/<path>.ssmt
//! <dir>/adam_v/<path>.ssmt
//! ```

use std::fs;
use std::path::Path;

use crate::config::{parse_pairs, parse_value, read_text, RunConfig};
use crate::data::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::train::optim::AdamState;

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.txt";
pub const STATE: &str = "state.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: f64,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn write_store(dir: &Path, store: &ParamStore) -> Result<()> {
    mkdir(dir)?;
    store
        .iter()
        .try_for_each(|(path, t)| write_tensor(&dir.join(format!("{path}.ssmt")), t))
}

fn read_store(dir: &Path, paths: &[String]) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for p in paths {
        store.insert(p.clone(), read_tensor(&dir.join(format!("{p}.ssmt")))?);
    }
    Ok(store)
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        mkdir(dir)?;
        let manifest: String = self.params.paths().map(|p| format!("{p}\n")).collect();
        write_file(&dir.join(MANIFEST), &manifest)?;
        write_file(&dir.join(CONFIG), &self.config.render())?;
        write_file(
            &dir.join(STATE),
            &format!("epoch={}\nbest_val={}\nadam_t={}\n", self.epoch, self.best_val, self.adam.t),
        )?;
        write_store(&dir.join("params"), &self.params)?;
        write_store(&dir.join("adam_m"), &self.adam.m)?;
        write_store(&dir.join("adam_v"), &self.adam.v)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let paths: Vec<String> = read_text(&dir.join(MANIFEST))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        let config = RunConfig::parse(&read_text(&dir.join(CONFIG))?)?;
        let (mut epoch, mut best_val, mut t) = (None, None, None);
        for (k, v) in parse_pairs(&read_text(&dir.join(STATE))?)? {
            match k.as_str() {
                "epoch" => epoch = Some(parse_value(&k, &v)?),
                "best_val" => best_val = Some(parse_value(&k, &v)?),
                "adam_t" => t = Some(parse_value(&k, &v)?),
                _ => return Err(Error::Config(format!("unknown checkpoint state key `{k}`"))),
            }
        }
        let missing = |k: &str| Error::Config(format!("checkpoint state lacks `{k}`"));
        let params = read_store(&dir.join("params"), &paths)?;
        let adam = AdamState {
            m: read_store(&dir.join("adam_m"), &paths)?,
            v: read_store(&dir.join("adam_v"), &paths)?,
            t: t.ok_or_else(|| missing("adam_t"))?,
        };
        Ok(Checkpoint {
            config,
            params,
            adam,
            epoch: epoch.ok_or_else(|| missing("epoch"))?,
            best_val: best_val.ok_or_else(|| missing("best_val"))?,
        })
    }
}
