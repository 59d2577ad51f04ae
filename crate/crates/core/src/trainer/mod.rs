//! Mean-teacher training: batch preparation, student objective, SGD with
//! momentum, EMA teacher maintenance, checkpoints and inference.

mod checkpoint;
mod config;
mod run;
mod step;

use std::collections::BTreeMap;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{LrSchedule, TrainConfig};
pub use run::{read_history, run_training, train_pools, write_history, Pools, RunOptions, Sampler, CHECKPOINT_DIR, HISTORY_FILE};
pub use step::{
    prepare_batch, prepare_pair, prototype_coefficients, student_objective, train_step, Objective, PairViews, Prepared,
    PreparedPair, StepReport,
};

use crate::backbone::{self, Arch, BackboneParams, BackboneVars};
use crate::error::{Error, Result};
use crate::protohead::{self, BankVars, ClassifierBank, ProbabilityMap, BANK_NAMES};
use crate::tensor::{Rng, Scalar, Tape, Tensor, Var};

/// Backbone plus classifier heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub backbone: BackboneParams<T>,
    pub bank: ClassifierBank<T>,
}

/// Tape handles of a registered [`Model`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub backbone: BackboneVars,
    pub bank: BankVars,
}

impl ModelVars {
    pub fn named(&self) -> Vec<(String, Var)> {
        let mut v: Vec<(String, Var)> = self.backbone.vars.iter().map(|(k, &x)| (k.clone(), x)).collect();
        v.extend(self.bank.named().iter().map(|&(k, x)| (k.to_string(), x)));
        v
    }
}

impl<T: Scalar> Model<T> {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let root = Rng::new(cfg.seed).split(0x1417);
        let backbone = BackboneParams::init(cfg.arch(), &mut root.split(0));
        let bank = ClassifierBank::init(cfg.classes, cfg.feature_dim, cfg.tau_temp, &root.split(1))?;
        Ok(Model { backbone, bank })
    }

    pub fn arch(&self) -> Arch {
        self.backbone.arch
    }

    /// Every tensor by name; classifier names carry no dots, backbone names do.
    pub fn to_map(&self) -> BTreeMap<String, Tensor<T>> {
        let mut m = self.backbone.tensors.clone();
        m.extend(self.bank.to_map());
        m
    }

    pub fn from_map(arch: Arch, mut map: BTreeMap<String, Tensor<T>>, tau_temp: f64) -> Result<Self> {
        let bank = ClassifierBank::from_map(&map, tau_temp)?;
        for n in BANK_NAMES {
            map.remove(n);
        }
        let expected = arch.layout();
        if expected.len() != map.len() {
            return Err(Error::Contract(format!(
                "backbone expects {} tensors, found {}",
                expected.len(),
                map.len()
            )));
        }
        for (name, shape) in &expected {
            match map.get(name) {
                Some(t) if t.shape() == &shape[..] => {}
                Some(t) => {
                    return Err(Error::Contract(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Contract(format!("missing tensor {name}"))),
            }
        }
        if bank.feature_dim() != arch.feature_dim {
            return Err(Error::Contract(format!(
                "classifier expects {} feature channels, backbone produces {}",
                bank.feature_dim(),
                arch.feature_dim
            )));
        }
        Ok(Model {
            backbone: BackboneParams { arch, tensors: map },
            bank,
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        match self.bank.get_mut(name) {
            Some(t) => Some(t),
            None => self.backbone.tensors.get_mut(name),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            backbone: self.backbone.cast(),
            bank: self.bank.cast(),
        }
    }

    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> ModelVars {
        ModelVars {
            backbone: self.backbone.register(tape, trainable),
            bank: self.bank.register(tape, trainable),
        }
    }

    /// Linear-head class probabilities for one image.
    pub fn predict_linear(&self, image: &Tensor<T>) -> Result<ProbabilityMap<T>> {
        let ft = backbone::forward(&self.backbone, image)?;
        protohead::linear_forward(&ft, &self.bank)
    }
}

/// Teacher EMA over backbone and classifier tensors.
pub fn ema_update_model<T: Scalar>(teacher: &mut Model<T>, student: &Model<T>, decay: f64) -> Result<()> {
    backbone::ema_update(&mut teacher.backbone, &student.backbone, decay)?;
    let mut t = teacher.bank.to_map();
    backbone::ema_update_tensors(&mut t, &student.bank.to_map(), decay)?;
    teacher.bank = ClassifierBank::from_map(&t, teacher.bank.tau_temp)?;
    Ok(())
}

/// One row of the per-iteration log.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub t: usize,
    /// In [`crate::losses::BRANCHES`] order.
    pub branches: [f64; 4],
    pub total: f64,
    pub lr: f64,
    pub lambda_sim: f64,
    pub gamma: f64,
}

pub const HISTORY_HEADER: &str = "t,L_in1,L_out1,L_in2,L_out2,total,lr,lambda_sim,gamma";

impl HistoryRow {
    pub fn to_csv(&self) -> String {
        let [a, b, c, d] = self.branches;
        format!(
            "{},{a},{b},{c},{d},{},{},{},{}",
            self.t, self.total, self.lr, self.lambda_sim, self.gamma
        )
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub student: Model<f32>,
    pub teacher: Model<f32>,
    /// Momentum buffer per parameter name.
    pub momentum: BTreeMap<String, Tensor<f32>>,
    /// Completed iterations.
    pub t: usize,
    pub history: Vec<HistoryRow>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let student = Model::init(cfg)?;
        let momentum = student
            .to_map()
            .into_iter()
            .map(|(k, v)| (k, Tensor::zeros(v.shape().to_vec())))
            .collect();
        Ok(TrainState {
            teacher: student.clone(),
            student,
            momentum,
            t: 0,
            history: Vec::new(),
        })
    }

    /// Random stream of iteration `t`; depends on nothing else, so a resumed
    /// run draws what the uninterrupted one would have.
    pub fn step_rng(cfg: &TrainConfig, t: usize) -> Rng {
        Rng::new(cfg.seed).split(0x57e9).split(t as u64)
    }
}

pub fn lr_at(t: usize, t_max: usize, lr0: f64, schedule: LrSchedule) -> f64 {
    match schedule {
        LrSchedule::Constant => lr0,
        LrSchedule::Poly => {
            if t_max == 0 {
                return lr0;
            }
            let r = (t as f64 / t_max as f64).clamp(0.0, 1.0);
            lr0 * (1.0 - r).powf(0.9)
        }
    }
}

/// Class map from the student's linear head alone.
pub fn infer(model: &Model<f32>, image: &Tensor<f32>) -> Result<Tensor<u8>> {
    let p = model.predict_linear(image)?;
    let (_, h, w) = p.values.chw()?;
    let idx = p.values.argmax_axis0()?;
    Tensor::from_vec([h, w], idx.into_iter().map(|k| k as u8).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_values() {
        assert_eq!(lr_at(0, 100, 0.03, LrSchedule::Poly), 0.03);
        assert_eq!(lr_at(100, 100, 0.03, LrSchedule::Poly), 0.0);
        assert!((lr_at(50, 100, 0.03, LrSchedule::Poly) - 0.01608).abs() < 1e-5);
        assert_eq!(lr_at(70, 100, 0.03, LrSchedule::Constant), 0.03);
    }

    #[test]
    fn zero_head_infers_background() {
        let cfg = TrainConfig {
            levels: 2,
            ..TrainConfig::default()
        };
        let mut m = Model::<f32>::init(&cfg).unwrap();
        m.bank = ClassifierBank::zeros(2, cfg.feature_dim, cfg.tau_temp);
        let y = infer(&m, &Tensor::from_fn([1, 16, 16], |i| (i as f32).sin())).unwrap();
        assert!(y.data().iter().all(|&v| v == 0));
        assert!(matches!(
            infer(&m, &Tensor::zeros([1, 18, 16])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn model_map_round_trip() {
        let cfg = TrainConfig {
            levels: 2,
            ..TrainConfig::default()
        };
        let m = Model::<f32>::init(&cfg).unwrap();
        let back = Model::from_map(m.arch(), m.to_map(), cfg.tau_temp).unwrap();
        assert_eq!(back, m);
        let mut broken = m.to_map();
        broken.remove("head.w");
        assert!(Model::from_map(m.arch(), broken, cfg.tau_temp).is_err());
    }
}
