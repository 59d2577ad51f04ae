//! Checkpoint directories:
//!
//! ```text
//! tensors.bin   records back to back (student, teacher.*, momentum.*)
//! index.txt     name \t byte offset \t comma-separated shape
//! config.cfg    the training configuration
//! meta.txt      t = completed iterations
//! ```
//!
//! A checkpoint is assembled in a sibling temporary directory and renamed
//! into place.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

use super::{Model, TrainConfig, TrainState};

pub const TENSORS_FILE: &str = "tensors.bin";
pub const INDEX_FILE: &str = "index.txt";
pub const CONFIG_FILE: &str = "config.cfg";
pub const META_FILE: &str = "meta.txt";

const TEACHER: &str = "teacher.";
const MOMENTUM: &str = "momentum.";

/// A saved training state with the configuration that produced it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub cfg: TrainConfig,
    pub state: TrainState,
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    dir.with_file_name(name)
}

pub fn save_checkpoint(dir: &Path, cfg: &TrainConfig, state: &TrainState) -> Result<()> {
    let mut named: Vec<(String, &Tensor<f32>)> = Vec::new();
    let student = state.student.to_map();
    let teacher = state.teacher.to_map();
    named.extend(student.iter().map(|(k, v)| (k.clone(), v)));
    named.extend(teacher.iter().map(|(k, v)| (format!("{TEACHER}{k}"), v)));
    named.extend(state.momentum.iter().map(|(k, v)| (format!("{MOMENTUM}{k}"), v)));

    let mut blob = Vec::new();
    let mut index = String::new();
    for (name, t) in named {
        let shape: Vec<String> = t.shape().iter().map(|e| e.to_string()).collect();
        let _ = writeln!(index, "{name}\t{}\t{}", blob.len(), shape.join(","));
        write_tensor(&mut blob, t).map_err(|e| Error::io(dir, e))?;
    }

    let tmp = sibling(dir, &format!(".tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let put = |name: &str, bytes: &[u8]| {
        let p = tmp.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    put(TENSORS_FILE, &blob)?;
    put(INDEX_FILE, index.as_bytes())?;
    put(CONFIG_FILE, cfg.to_text().as_bytes())?;
    put(META_FILE, format!("t = {}\n", state.t).as_bytes())?;

    let old = sibling(dir, ".old");
    if dir.exists() {
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

fn read_index(dir: &Path, blob: &[u8]) -> Result<BTreeMap<String, Tensor<f32>>> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bin = dir.join(TENSORS_FILE);
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |d: &str| Error::format(&path, format!("line {}: {d}", n + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        let [name, off, shape] = cols[..] else {
            return Err(bad("expected name, offset and shape"));
        };
        let off: usize = off.parse().map_err(|_| bad("bad offset"))?;
        let shape: Vec<usize> = if shape.is_empty() {
            Vec::new()
        } else {
            shape
                .split(',')
                .map(|s| s.parse().map_err(|_| bad("bad shape")))
                .collect::<Result<_>>()?
        };
        let rec = blob.get(off..).ok_or_else(|| bad("offset beyond tensor file"))?;
        let t = read_tensor(&mut &rec[..], &bin)?
            .ok_or_else(|| Error::format(&bin, format!("no record at offset {off}")))?
            .into_f32(&bin)?;
        if t.shape() != &shape[..] {
            return Err(bad("record shape disagrees with index"));
        }
        out.insert(name.to_string(), t);
    }
    Ok(out)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let cfg = TrainConfig::load(&dir.join(CONFIG_FILE))?;
    let meta_path = dir.join(META_FILE);
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let t = meta
        .lines()
        .find_map(|l| l.split_once('=').filter(|(k, _)| k.trim() == "t").map(|(_, v)| v.trim().to_string()))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(&meta_path, "missing t"))?;
    let bin = dir.join(TENSORS_FILE);
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let all = read_index(dir, &blob)?;

    let mut student = BTreeMap::new();
    let mut teacher = BTreeMap::new();
    let mut momentum = BTreeMap::new();
    for (k, v) in all {
        if let Some(n) = k.strip_prefix(TEACHER) {
            teacher.insert(n.to_string(), v);
        } else if let Some(n) = k.strip_prefix(MOMENTUM) {
            momentum.insert(n.to_string(), v);
        } else {
            student.insert(k, v);
        }
    }
    let arch = cfg.arch();
    let student = Model::from_map(arch, student, cfg.tau_temp)?;
    let teacher = Model::from_map(arch, teacher, cfg.tau_temp)?;
    for (k, v) in student.to_map() {
        match momentum.get(&k) {
            Some(m) if m.shape() == v.shape() => {}
            _ => return Err(Error::format(&bin, format!("momentum buffer for {k} is missing or misshapen"))),
        }
    }
    Ok(Checkpoint {
        cfg,
        state: TrainState {
            student,
            teacher,
            momentum,
            t,
            history: Vec::new(),
        },
    })
}
