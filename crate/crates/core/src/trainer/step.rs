use crate::backbone::{self, FeatureMap};
use crate::corrsynth::{cross_synthesize, CrossSynthesis};
use crate::error::{Error, Result};
use crate::losses::{self, SupervisionPack, BRANCHES};
use crate::mixing::{self, bcmix, gen_mask, CutMask, MixSchedule, StrongParams, WeakParams};
use crate::protohead::{self, blend_coefficients, HeadKind, ProbabilityMap};
use crate::synthdata::Sample;
use crate::tensor::{Rng, Scalar, Tape, Tensor, Var};

use super::{ema_update_model, lr_at, HistoryRow, Model, ModelVars, TrainConfig, TrainState};

/// Student inputs and targets for one labeled/unlabeled pair, in
/// [`BRANCHES`] order.
#[derive(Clone, Debug)]
pub struct PreparedPair<T = f32> {
    pub images: [Tensor<T>; 4],
    pub packs: [SupervisionPack<T>; 4],
}

#[derive(Clone, Debug)]
pub enum Prepared<T = f32> {
    Mixed(Vec<PreparedPair<T>>),
    /// Weakly augmented labeled images with their ground truth.
    Supervised(Vec<(Tensor<T>, SupervisionPack<T>)>),
}

impl Prepared<f32> {
    pub fn cast<U: Scalar>(&self) -> Prepared<U> {
        match self {
            Prepared::Mixed(pairs) => Prepared::Mixed(
                pairs
                    .iter()
                    .map(|p| PreparedPair {
                        images: p.images.clone().map(|t| t.cast()),
                        packs: p.packs.clone().map(|k| k.cast()),
                    })
                    .collect(),
            ),
            Prepared::Supervised(items) => {
                Prepared::Supervised(items.iter().map(|(i, p)| (i.cast(), p.cast())).collect())
            }
        }
    }
}

/// Every intermediate view built for one pair; kept for inspection.
#[derive(Clone, Debug)]
pub struct PairViews {
    pub x_weak: Tensor<f32>,
    pub y_weak: Tensor<u8>,
    pub u_weak: Tensor<f32>,
    pub u_strong: Tensor<f32>,
    pub synthesis: Option<CrossSynthesis<f32>>,
    /// Virtual labeled and unlabeled images.
    pub x_virtual: Tensor<f32>,
    pub u_virtual: Tensor<f32>,
    /// Progressively mixed labeled image and its ratio.
    pub x_progressive: Tensor<f32>,
    pub progressive_ratio: f64,
    pub m1: CutMask,
    pub m2: CutMask,
    pub same_domain: bool,
    pub pseudo_probs: ProbabilityMap<f32>,
}

fn w_prime(width: usize, ratio: f64) -> usize {
    ((width as f64 * ratio).round() as usize).clamp(1, width)
}

/// Prototypes the teacher uses for pseudo labels.
fn teacher_prototypes(teacher: &Model<f32>, cfg: &TrainConfig) -> Result<Tensor<f32>> {
    let b = &teacher.bank;
    if cfg.bpa {
        b.proto_w1.zip_with(&b.proto_w2, "prototype average", |x, y| 0.5 * x + 0.5 * y)
    } else {
        Ok(b.proto_w1.clone())
    }
}

fn teacher_corrected(
    teacher: &Model<f32>,
    ft: &FeatureMap<f32>,
    protos: &Tensor<f32>,
    cfg: &TrainConfig,
) -> Result<ProbabilityMap<f32>> {
    let linear = protohead::linear_forward(ft, &teacher.bank)?;
    if !(cfg.pa && cfg.pplc) {
        return Ok(linear);
    }
    let cosine = protohead::cossim_forward(ft, protos, cfg.tau_temp, HeadKind::CosAvg)?;
    protohead::pplc(&cosine, &linear, cfg.tau)
}

/// Builds the mixed student inputs and their supervision for one pair. All
/// of it is computed without gradients from the teacher.
pub fn prepare_pair(
    teacher: &Model<f32>,
    labeled: &Sample,
    unlabeled: &Sample,
    cfg: &TrainConfig,
    t: usize,
    rng: &Rng,
) -> Result<(PreparedPair<f32>, PairViews)> {
    let (_, h, w) = labeled.image.chw()?;
    if unlabeled.image.shape() != labeled.image.shape() {
        return Err(Error::dim(
            "train_step",
            format!(
                "labeled image {:?} and unlabeled image {:?} differ",
                labeled.image.shape(),
                unlabeled.image.shape()
            ),
        ));
    }
    let wx = WeakParams::draw(&mut rng.split(1), h, w);
    let x_weak = wx.apply(&labeled.image)?;
    let y_weak = wx.apply(&labeled.mask)?;
    let u_weak = WeakParams::draw(&mut rng.split(2), h, w).apply(&unlabeled.image)?;
    let mut srng = rng.split(3);
    let u_strong = StrongParams::draw(&mut srng).apply(&u_weak, &mut srng);

    let feat_u = backbone::forward(&teacher.backbone, &u_weak)?;
    let synthesis = if cfg.fixmix || cfg.pdmix {
        let feat_x = backbone::forward(&teacher.backbone, &x_weak)?;
        Some(cross_synthesize(&x_weak, &u_weak, &feat_x, &feat_u, w_prime(w, cfg.w_prime_ratio))?)
    } else {
        None
    };
    let (x_virtual, u_virtual) = match (&synthesis, cfg.fixmix) {
        (Some(s), true) => (
            mixing::fixmix(&x_weak, &s.x_from_u, cfg.lambda_fix)?,
            mixing::fixmix(&u_weak, &s.u_from_x, cfg.lambda_fix)?,
        ),
        _ => (x_weak.clone(), u_weak.clone()),
    };
    let sched = MixSchedule {
        lambda_fix: cfg.lambda_fix,
        alpha: cfg.alpha,
        t,
        t_max: cfg.t_max,
    };
    let (x_progressive, progressive_ratio) = match (&synthesis, cfg.pdmix) {
        (Some(s), true) => mixing::pdmix(&x_weak, &s.x_from_u, &sched, &mut rng.split(4))?,
        _ => (x_weak.clone(), 0.0),
    };
    let m1 = gen_mask(h, w, &mut rng.split(5))?;
    let m2 = gen_mask(h, w, &mut rng.split(6))?;
    let (in1, out1) = bcmix(&x_virtual, &u_virtual, &m1)?;
    let (in2, out2) = bcmix(&x_progressive, &u_strong, &m2)?;

    let protos = teacher_prototypes(teacher, cfg)?;
    let corrected_weak = teacher_corrected(teacher, &feat_u, &protos, cfg)?;
    let same_domain = labeled.domain == unlabeled.domain;
    let pseudo_probs = if cfg.avg && !same_domain {
        let corrected_virtual = if cfg.fixmix {
            let ft = backbone::forward(&teacher.backbone, &u_virtual)?;
            teacher_corrected(teacher, &ft, &protos, cfg)?
        } else {
            corrected_weak.clone()
        };
        losses::avg_probability(&corrected_virtual, &corrected_weak, false)?
    } else {
        corrected_weak
    };

    let lab = SupervisionPack::labeled(losses::one_hot(&y_weak, cfg.classes)?)?;
    let pseudo = SupervisionPack::pseudo(&pseudo_probs, cfg.tau)?;
    let (pin1, pout1) = SupervisionPack::mix(&lab, &pseudo, &m1, cfg.tau)?;
    let (pin2, pout2) = SupervisionPack::mix(&lab, &pseudo, &m2, cfg.tau)?;
    let mut packs = [pin1, pout1, pin2, pout2];
    if cfg.zero_filter_masks {
        for p in &mut packs {
            p.filter = Tensor::zeros(p.filter.shape().to_vec());
        }
    }
    let pair = PreparedPair {
        images: [in1, out1, in2, out2],
        packs,
    };
    let views = PairViews {
        x_weak,
        y_weak,
        u_weak,
        u_strong,
        synthesis,
        x_virtual,
        u_virtual,
        x_progressive,
        progressive_ratio,
        m1,
        m2,
        same_domain,
        pseudo_probs,
    };
    Ok((pair, views))
}

/// Prepares a whole batch with per-pair random streams split from `rng`.
pub fn prepare_batch(
    teacher: &Model<f32>,
    labeled: &[&Sample],
    unlabeled: &[&Sample],
    cfg: &TrainConfig,
    t: usize,
    rng: &Rng,
) -> Result<Prepared<f32>> {
    let half = cfg.batch_size / 2;
    if labeled.len() != half || (!cfg.supervised_only && unlabeled.len() != half) {
        return Err(Error::Contract(format!(
            "batch needs {half} labeled and {half} unlabeled samples, got {} and {}",
            labeled.len(),
            unlabeled.len()
        )));
    }
    if cfg.supervised_only {
        let items = labeled
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let p = WeakParams::draw(&mut rng.split(i as u64).split(1), s.mask.shape()[0], s.mask.shape()[1]);
                let y = losses::one_hot(&p.apply(&s.mask)?, cfg.classes)?;
                Ok((p.apply(&s.image)?, SupervisionPack::labeled(y)?))
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(Prepared::Supervised(items));
    }
    let pairs = labeled
        .iter()
        .zip(unlabeled)
        .enumerate()
        .map(|(i, (x, u))| prepare_pair(teacher, x, u, cfg, t, &rng.split(i as u64)).map(|(p, _)| p))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared::Mixed(pairs))
}

/// Recorded student loss.
pub struct Objective {
    pub total: Var,
    /// In [`BRANCHES`] order; only the first is used in supervised mode.
    pub branches: [Var; 4],
    pub params: ModelVars,
}

fn mean<T: Scalar>(tape: &mut Tape<T>, items: &[Var]) -> Result<Var> {
    let w = T::lit(1.0 / items.len() as f64);
    let terms: Vec<(T, Var)> = items.iter().map(|&v| (w, v)).collect();
    tape.linear_combination(&terms)
}

/// Weights on `(W₁, W₂)` of the virtual-domain and real-domain prototypes at
/// iteration `t`; `None` when the cosine heads are off.
pub fn prototype_coefficients(cfg: &TrainConfig, t: usize) -> Result<Option<([f64; 2], [f64; 2])>> {
    if !cfg.pa {
        return Ok(None);
    }
    if !cfg.bpa {
        return Ok(Some(([1.0, 0.0], [1.0, 0.0])));
    }
    let (a, b) = blend_coefficients(t, cfg.t_max)?;
    Ok(Some(([a, b], [b, a])))
}

/// Records the student loss for a prepared batch at iteration `t`.
pub fn student_objective<T: Scalar>(
    tape: &mut Tape<T>,
    student: &Model<T>,
    prepared: &Prepared<T>,
    cfg: &TrainConfig,
    t: usize,
) -> Result<Objective> {
    let params = student.register(tape, true);
    let bank = params.bank;
    match prepared {
        Prepared::Supervised(items) => {
            if items.is_empty() {
                return Err(Error::Contract("empty batch".into()));
            }
            let mut per = Vec::with_capacity(items.len());
            for (img, pack) in items {
                let x = tape.constant(img.clone());
                let ft = params.backbone.forward(tape, x)?;
                let p = protohead::linear_on_tape(tape, ft, bank.linear_w, bank.linear_b)?;
                per.push(losses::seg_loss_on_tape(tape, pack, p, cfg.dice)?);
            }
            let total = mean(tape, &per)?;
            let zero = tape.constant(Tensor::scalar(T::zero()));
            Ok(Objective {
                total,
                branches: [total, zero, zero, zero],
                params,
            })
        }
        Prepared::Mixed(pairs) => {
            if pairs.is_empty() {
                return Err(Error::Contract("empty batch".into()));
            }
            let (virt, real) = match prototype_coefficients(cfg, t)? {
                None => (None, None),
                Some(([a1, a2], [b1, b2])) => {
                    let mut blend = |c1: f64, c2: f64| {
                        tape.linear_combination(&[(T::lit(c1), bank.proto_w1), (T::lit(c2), bank.proto_w2)])
                    };
                    (Some(blend(a1, a2)?), Some(blend(b1, b2)?))
                }
            };
            let mut per: [Vec<Var>; 4] = Default::default();
            for pair in pairs {
                for k in 0..4 {
                    let x = tape.constant(pair.images[k].clone());
                    let ft = params.backbone.forward(tape, x)?;
                    let lin = protohead::linear_on_tape(tape, ft, bank.linear_w, bank.linear_b)?;
                    let protos = if k < 2 { virt } else { real };
                    let cos = protos
                        .map(|w| protohead::cossim_on_tape(tape, ft, w, cfg.tau_temp))
                        .transpose()?;
                    per[k].push(losses::branch_loss_on_tape(tape, &pair.packs[k], lin, cos, cfg.dice)?);
                }
            }
            let branches = [
                mean(tape, &per[0])?,
                mean(tape, &per[1])?,
                mean(tape, &per[2])?,
                mean(tape, &per[3])?,
            ];
            let total = losses::total_on_tape(tape, branches)?;
            Ok(Objective {
                total,
                branches,
                params,
            })
        }
    }
}

/// Outcome of one iteration.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub row: HistoryRow,
    /// Parameters that received no gradient signal this step.
    pub untouched: Vec<String>,
}

/// One full iteration: prepare, student loss, SGD with momentum and weight
/// decay, teacher EMA, `t + 1`.
pub fn train_step(
    state: &mut TrainState,
    labeled: &[&Sample],
    unlabeled: &[&Sample],
    cfg: &TrainConfig,
) -> Result<StepReport> {
    let t = state.t;
    if t >= cfg.t_max {
        return Err(Error::Contract(format!("iteration {t} is past t_max = {}", cfg.t_max)));
    }
    let rng = TrainState::step_rng(cfg, t);
    let prepared = prepare_batch(&state.teacher, labeled, unlabeled, cfg, t, &rng)?;

    let mut tape = Tape::<f32>::new();
    let obj = student_objective(&mut tape, &state.student, &prepared, cfg, t)?;
    let branch_vals = obj.branches.map(|b| tape.value(b).item() as f64);
    let total = tape.value(obj.total).item() as f64;
    for (k, v) in branch_vals.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                t,
                branch: BRANCHES[k].to_string(),
                detail: format!("branch loss {v}, batch of {} pairs", cfg.batch_size / 2),
            });
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite {
            t,
            branch: "total".into(),
            detail: format!("total {total} from branches {branch_vals:?}"),
        });
    }
    tape.backward(obj.total)?;

    let lr = lr_at(t, cfg.t_max, cfg.lr0, cfg.lr_schedule);
    let (lr32, mu, wd) = (lr as f32, cfg.momentum as f32, cfg.weight_decay as f32);
    let mut untouched = Vec::new();
    for (name, var) in obj.params.named() {
        let Some(g) = tape.grad(var) else {
            untouched.push(name);
            continue;
        };
        if g.data().iter().all(|&v| v == 0.0) {
            untouched.push(name.clone());
        }
        let theta = state
            .student
            .get_mut(&name)
            .ok_or_else(|| Error::Contract(format!("student has no tensor {name}")))?;
        let buf = state
            .momentum
            .get_mut(&name)
            .ok_or_else(|| Error::Contract(format!("no momentum buffer for {name}")))?;
        if buf.shape() != theta.shape() {
            return Err(Error::Contract(format!("momentum buffer for {name} has the wrong shape")));
        }
        for ((p, b), &gv) in theta.data_mut().iter_mut().zip(buf.data_mut()).zip(g.data()) {
            let step = gv + wd * *p;
            *b = mu * *b + step;
            *p -= lr32 * *b;
        }
    }
    ema_update_model(&mut state.teacher, &state.student, cfg.ema_decay)?;
    state.t += 1;

    let row = HistoryRow {
        t,
        branches: branch_vals,
        total,
        lr,
        lambda_sim: protohead::lambda_sim(t, cfg.t_max)?,
        gamma: MixSchedule {
            lambda_fix: cfg.lambda_fix,
            alpha: cfg.alpha,
            t,
            t_max: cfg.t_max,
        }
        .gamma(),
    };
    state.history.push(row.clone());
    Ok(StepReport { row, untouched })
}
