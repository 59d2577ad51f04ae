//! Flat `key = value` training configuration.

use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::Arch;
use crate::error::{Error, Result};
use crate::tensor::DiceReduction;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    /// `lr0·(1 − t/t_max)^0.9`.
    Poly,
    Constant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_fix: f64,
    pub alpha: f64,
    pub tau_temp: f64,
    pub tau: f64,
    /// Reduced correlation extent as a fraction of the image width.
    pub w_prime_ratio: f64,
    pub ema_decay: f64,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub t_max: usize,
    /// Pairs of one labeled and one unlabeled image, so always even.
    pub batch_size: usize,
    pub seed: u64,
    pub labeled_domain: u32,
    pub fixmix: bool,
    pub pdmix: bool,
    pub avg: bool,
    /// Train the cosine heads at all.
    pub pa: bool,
    /// Two prototype sets blended over training instead of one.
    pub bpa: bool,
    pub pplc: bool,
    pub lr_schedule: LrSchedule,
    /// Ignore unlabeled data and train on labeled images alone.
    pub supervised_only: bool,
    pub in_channels: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub dice: DiceReduction,
    /// Zero disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// Forces every filter mask to zero. Not settable from a file.
    pub zero_filter_masks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_fix: 0.75,
            alpha: 0.7,
            tau_temp: 0.05,
            tau: 0.95,
            w_prime_ratio: 0.25,
            ema_decay: 0.99,
            lr0: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            t_max: 2000,
            batch_size: 8,
            seed: 0,
            labeled_domain: 0,
            fixmix: true,
            pdmix: true,
            avg: true,
            pa: true,
            bpa: true,
            pplc: true,
            lr_schedule: LrSchedule::Poly,
            supervised_only: false,
            in_channels: 1,
            levels: 3,
            base_channels: 8,
            feature_dim: 16,
            classes: 2,
            dice: DiceReduction::Joint,
            checkpoint_every: 0,
            zero_filter_masks: false,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl TrainConfig {
    pub fn arch(&self) -> Arch {
        Arch {
            in_channels: self.in_channels,
            levels: self.levels,
            base_channels: self.base_channels,
            feature_dim: self.feature_dim,
        }
    }

    /// Ablation with every component off: only the two-way
    /// CutMix consistency remains.
    pub fn bcmix_only(mut self) -> Self {
        self.fixmix = false;
        self.pdmix = false;
        self.avg = false;
        self.pa = false;
        self.bpa = false;
        self.pplc = false;
        self
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "lambda_fix" => self.lambda_fix = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "tau_temp" => self.tau_temp = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "w_prime_ratio" => self.w_prime_ratio = parse_num(key, v)?,
            "ema_decay" => self.ema_decay = parse_num(key, v)?,
            "lr0" => self.lr0 = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "t_max" => self.t_max = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "labeled_domain" => self.labeled_domain = parse_num(key, v)?,
            "fixmix" => self.fixmix = parse_bool(key, v)?,
            "pdmix" => self.pdmix = parse_bool(key, v)?,
            "avg" => self.avg = parse_bool(key, v)?,
            "pa" => self.pa = parse_bool(key, v)?,
            "bpa" => self.bpa = parse_bool(key, v)?,
            "pplc" => self.pplc = parse_bool(key, v)?,
            "supervised_only" => self.supervised_only = parse_bool(key, v)?,
            "lr_schedule" => {
                self.lr_schedule = match v {
                    "poly" => LrSchedule::Poly,
                    "constant" => LrSchedule::Constant,
                    _ => return Err(Error::Config(format!("lr_schedule: unknown value {v:?}"))),
                }
            }
            "in_channels" => self.in_channels = parse_num(key, v)?,
            "levels" => self.levels = parse_num(key, v)?,
            "base_channels" => self.base_channels = parse_num(key, v)?,
            "feature_dim" => self.feature_dim = parse_num(key, v)?,
            "classes" => self.classes = parse_num(key, v)?,
            "dice" => {
                self.dice = match v {
                    "joint" => DiceReduction::Joint,
                    "per_class" => DiceReduction::PerClass,
                    _ => return Err(Error::Config(format!("dice: unknown value {v:?}"))),
                }
            }
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let b = |v: bool| if v { "true" } else { "false" };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("lambda_fix", self.lambda_fix.to_string());
        kv("alpha", self.alpha.to_string());
        kv("tau_temp", self.tau_temp.to_string());
        kv("tau", self.tau.to_string());
        kv("w_prime_ratio", self.w_prime_ratio.to_string());
        kv("ema_decay", self.ema_decay.to_string());
        kv("lr0", self.lr0.to_string());
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("t_max", self.t_max.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("labeled_domain", self.labeled_domain.to_string());
        kv("fixmix", b(self.fixmix).into());
        kv("pdmix", b(self.pdmix).into());
        kv("avg", b(self.avg).into());
        kv("pa", b(self.pa).into());
        kv("bpa", b(self.bpa).into());
        kv("pplc", b(self.pplc).into());
        kv(
            "lr_schedule",
            match self.lr_schedule {
                LrSchedule::Poly => "poly",
                LrSchedule::Constant => "constant",
            }
            .into(),
        );
        kv("supervised_only", b(self.supervised_only).into());
        kv("in_channels", self.in_channels.to_string());
        kv("levels", self.levels.to_string());
        kv("base_channels", self.base_channels.to_string());
        kv("feature_dim", self.feature_dim.to_string());
        kv("classes", self.classes.to_string());
        kv(
            "dice",
            match self.dice {
                DiceReduction::Joint => "joint",
                DiceReduction::PerClass => "per_class",
            }
            .into(),
        );
        kv("checkpoint_every", self.checkpoint_every.to_string());
        s
    }

    /// FNV-1a over the serialized form.
    pub fn fingerprint(&self) -> u64 {
        self.to_text().bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        })
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |k: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{k} = {v} outside [0, 1]")))
            }
        };
        frac("lambda_fix", self.lambda_fix)?;
        frac("tau", self.tau)?;
        frac("momentum", self.momentum)?;
        frac("w_prime_ratio", self.w_prime_ratio)?;
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay = {} outside [0, 1)", self.ema_decay)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha = {} must be positive", self.alpha)));
        }
        if !(self.tau_temp > 0.0) {
            return Err(Error::Config(format!("tau_temp = {} must be positive", self.tau_temp)));
        }
        if !(self.w_prime_ratio > 0.0) {
            return Err(Error::Config("w_prime_ratio must be positive".into()));
        }
        if self.lr0 < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("lr0 and weight_decay must be non-negative".into()));
        }
        if self.t_max < 1 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!("batch_size = {} must be positive and even", self.batch_size)));
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be at least 2".into()));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.feature_dim == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_unknown_keys() {
        let mut cfg = TrainConfig::default().bcmix_only();
        cfg.t_max = 17;
        cfg.dice = DiceReduction::PerClass;
        cfg.lr_schedule = LrSchedule::Constant;
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(matches!(TrainConfig::parse("bogus = 1"), Err(Error::Config(_))));
        assert!(TrainConfig::parse("batch_size = 3").is_err());
        assert!(TrainConfig::parse("tau = 1.5").is_err());
        let c = TrainConfig::parse("# comment\n t_max = 5 # trailing\n\nseed=9").unwrap();
        assert_eq!((c.t_max, c.seed), (5, 9));
    }
}
