use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::error::{Error, Result};
use crate::synthdata::{Dataset, Sample, Split};
use crate::tensor::Rng;

use super::{
    load_checkpoint, save_checkpoint, train_step, HistoryRow, TrainConfig, TrainState, HISTORY_HEADER,
};

pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Cycles through `n` items in an order reshuffled every epoch. The items of
/// iteration `t` depend only on `t`, never on earlier calls.
#[derive(Clone, Debug)]
pub struct Sampler {
    n: usize,
    rng: Rng,
}

impl Sampler {
    pub fn new(n: usize, rng: Rng) -> Self {
        Sampler { n, rng }
    }

    fn order(&self, epoch: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..self.n).collect();
        self.rng.split(epoch as u64).shuffle(&mut v);
        v
    }

    pub fn draw(&self, t: usize, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        let mut cached: Option<(usize, Vec<usize>)> = None;
        for k in 0..count {
            let pos = t * count + k;
            let epoch = pos / self.n;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, self.order(epoch)));
            }
            out.push(cached.as_ref().expect("just filled").1[pos % self.n]);
        }
        out
    }
}

/// Training samples held in memory.
#[derive(Clone, Debug, Default)]
pub struct Pools {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
}

impl Pools {
    /// Labeled pool: labeled training rows. Unlabeled pool: every other
    /// training row, across all domains.
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let mut pools = Pools::default();
        for e in ds.select(Split::Train, None) {
            let s = ds.load(e)?;
            if e.labeled {
                pools.labeled.push(s);
            } else {
                pools.unlabeled.push(s);
            }
        }
        Ok(pools)
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Receives the history CSV and the checkpoint directory.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Stop once this many iterations are complete (still checkpointing).
    pub stop_at: Option<usize>,
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(HISTORY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    let tmp = path.with_extension("csv.tmp");
    fs::write(&tmp, s).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(Error::format(path, "unexpected history header"));
    }
    lines
        .enumerate()
        .map(|(n, l)| {
            let bad = || Error::format(path, format!("row {}: malformed", n + 1));
            let v: Vec<f64> = l
                .split(',')
                .map(|c| c.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            let [t, a, b, c, d, total, lr, ls, g] = v[..] else {
                return Err(bad());
            };
            Ok(HistoryRow {
                t: t as usize,
                branches: [a, b, c, d],
                total,
                lr,
                lambda_sim: ls,
                gamma: g,
            })
        })
        .collect()
}

/// Loads the training split of `manifest` and trains on it.
pub fn run_training(cfg: &TrainConfig, manifest: &Path, opts: &RunOptions) -> Result<TrainState> {
    let ds = Dataset::open(manifest)?;
    let pools = Pools::from_dataset(&ds)?;
    train_pools(cfg, &pools, opts)
}

/// Trains for `t_max` iterations (or up to `opts.stop_at`), checkpointing
/// every `checkpoint_every` iterations and at the end.
pub fn train_pools(cfg: &TrainConfig, pools: &Pools, opts: &RunOptions) -> Result<TrainState> {
    cfg.validate()?;
    if pools.labeled.is_empty() {
        return Err(Error::Contract("no labeled training samples".into()));
    }
    if !cfg.supervised_only && pools.unlabeled.is_empty() {
        return Err(Error::Contract("no unlabeled training samples".into()));
    }
    if pools.labeled.iter().any(|s| s.domain != cfg.labeled_domain) {
        warn!("labeled pool contains samples outside domain {}", cfg.labeled_domain);
    }
    let mut state = match &opts.resume {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            if ck.cfg.arch() != cfg.arch() || ck.cfg.classes != cfg.classes {
                return Err(Error::Config("checkpoint architecture differs from the configuration".into()));
            }
            ck.state
        }
        None => TrainState::new(cfg)?,
    };
    let history_path = opts.out_dir.as_ref().map(|d| d.join(HISTORY_FILE));
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    if let (Some(_), Some(p)) = (&opts.resume, &history_path) {
        if p.exists() {
            let start = state.t;
            state.history = read_history(p)?.into_iter().filter(|r| r.t < start).collect();
        }
    }

    let half = cfg.batch_size / 2;
    let root = Rng::new(cfg.seed).split(0x5a3f);
    let lab_sampler = Sampler::new(pools.labeled.len(), root.split(0));
    let unl_sampler = Sampler::new(pools.unlabeled.len().max(1), root.split(1));
    let end = opts.stop_at.unwrap_or(cfg.t_max).min(cfg.t_max);
    let save = |state: &TrainState| -> Result<()> {
        if let Some(dir) = &opts.out_dir {
            save_checkpoint(&dir.join(CHECKPOINT_DIR), cfg, state)?;
            write_history(&dir.join(HISTORY_FILE), &state.history)?;
        }
        Ok(())
    };
    while state.t < end {
        let t = state.t;
        let lab: Vec<&Sample> = lab_sampler.draw(t, half).into_iter().map(|i| &pools.labeled[i]).collect();
        let unl: Vec<&Sample> = if cfg.supervised_only {
            Vec::new()
        } else {
            unl_sampler.draw(t, half).into_iter().map(|i| &pools.unlabeled[i]).collect()
        };
        let report = train_step(&mut state, &lab, &unl, cfg)?;
        if t % 100 == 0 {
            info!("t={t} total={:.4} lr={:.5}", report.row.total, report.row.lr);
        }
        if cfg.checkpoint_every > 0 && state.t % cfg.checkpoint_every == 0 && state.t < end {
            save(&state)?;
        }
    }
    save(&state)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_each_epoch() {
        let s = Sampler::new(5, Rng::new(1));
        let mut seen: Vec<usize> = (0..5).flat_map(|t| s.draw(t, 1)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.draw(3, 2), s.draw(3, 2));
    }
}
