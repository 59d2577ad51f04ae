//! Linear and prototype cosine-similarity classifier heads, the blending of
//! two prototype sets towards their mean, and prototype-based correction of
//! linear pseudo labels.

use std::cell::Cell;
use std::collections::BTreeMap;

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tape, Tensor, Var};

pub const LINEAR_W: &str = "linear_w";
pub const LINEAR_B: &str = "linear_b";
pub const PROTO_W1: &str = "proto_w1";
pub const PROTO_W2: &str = "proto_w2";
pub const BANK_NAMES: [&str; 4] = [LINEAR_W, LINEAR_B, PROTO_W1, PROTO_W2];

thread_local! {
    static COSSIM_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of cosine-head evaluations made on the calling thread.
pub fn cossim_invocations() -> u64 {
    COSSIM_CALLS.with(Cell::get)
}

/// Classifier parameters: a linear head and two prototype sets, all `C×D′`
/// except the `C`-vector bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierBank<T = f32> {
    pub linear_w: Tensor<T>,
    pub linear_b: Tensor<T>,
    pub proto_w1: Tensor<T>,
    pub proto_w2: Tensor<T>,
    pub tau_temp: f64,
}

fn unit_rows<T: Scalar>(classes: usize, dim: usize, rng: &mut Rng) -> Tensor<T> {
    let mut rows = Vec::with_capacity(classes * dim);
    for _ in 0..classes {
        let mut r: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        r.iter_mut().for_each(|v| *v /= n);
        rows.extend(r.into_iter().map(T::lit));
    }
    Tensor::from_vec([classes, dim], rows).expect("row count matches shape")
}

impl<T: Scalar> ClassifierBank<T> {
    pub fn init(classes: usize, feature_dim: usize, tau_temp: f64, rng: &Rng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Parameter(format!("need at least 2 classes, got {classes}")));
        }
        let mut lin = rng.split(0);
        let gain = (1.0 / feature_dim as f64).sqrt();
        Ok(ClassifierBank {
            linear_w: Tensor::from_fn([classes, feature_dim], |_| T::lit(lin.normal() * gain)),
            linear_b: Tensor::zeros([classes]),
            proto_w1: unit_rows(classes, feature_dim, &mut rng.split(1)),
            proto_w2: unit_rows(classes, feature_dim, &mut rng.split(2)),
            tau_temp,
        })
    }

    pub fn zeros(classes: usize, feature_dim: usize, tau_temp: f64) -> Self {
        ClassifierBank {
            linear_w: Tensor::zeros([classes, feature_dim]),
            linear_b: Tensor::zeros([classes]),
            proto_w1: Tensor::zeros([classes, feature_dim]),
            proto_w2: Tensor::zeros([classes, feature_dim]),
            tau_temp,
        }
    }

    pub fn classes(&self) -> usize {
        self.linear_w.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.linear_w.shape()[1]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        match name {
            LINEAR_W => Some(&self.linear_w),
            LINEAR_B => Some(&self.linear_b),
            PROTO_W1 => Some(&self.proto_w1),
            PROTO_W2 => Some(&self.proto_w2),
            _ => None,
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        match name {
            LINEAR_W => Some(&mut self.linear_w),
            LINEAR_B => Some(&mut self.linear_b),
            PROTO_W1 => Some(&mut self.proto_w1),
            PROTO_W2 => Some(&mut self.proto_w2),
            _ => None,
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor<T>> {
        BANK_NAMES
            .iter()
            .map(|&n| (n.to_string(), self.get(n).expect("known name").clone()))
            .collect()
    }

    pub fn from_map(map: &BTreeMap<String, Tensor<T>>, tau_temp: f64) -> Result<Self> {
        let take = |n: &str| {
            map.get(n)
                .cloned()
                .ok_or_else(|| Error::Contract(format!("classifier bank is missing {n}")))
        };
        let bank = ClassifierBank {
            linear_w: take(LINEAR_W)?,
            linear_b: take(LINEAR_B)?,
            proto_w1: take(PROTO_W1)?,
            proto_w2: take(PROTO_W2)?,
            tau_temp,
        };
        let (c, d) = bank.linear_w.hw()?;
        for (n, t) in [(PROTO_W1, &bank.proto_w1), (PROTO_W2, &bank.proto_w2)] {
            if t.shape() != [c, d] {
                return Err(Error::dim("classifier bank", format!("{n} has shape {:?}, expected [{c}, {d}]", t.shape())));
            }
        }
        if bank.linear_b.shape() != [c] {
            return Err(Error::dim("classifier bank", format!("bias has shape {:?}", bank.linear_b.shape())));
        }
        Ok(bank)
    }

    pub fn cast<U: Scalar>(&self) -> ClassifierBank<U> {
        ClassifierBank {
            linear_w: self.linear_w.cast(),
            linear_b: self.linear_b.cast(),
            proto_w1: self.proto_w1.cast(),
            proto_w2: self.proto_w2.cast(),
            tau_temp: self.tau_temp,
        }
    }

    /// Registers all four tensors; returned in [`BANK_NAMES`] order.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> BankVars {
        let mut reg = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BankVars {
            linear_w: reg(&self.linear_w),
            linear_b: reg(&self.linear_b),
            proto_w1: reg(&self.proto_w1),
            proto_w2: reg(&self.proto_w2),
            tau_temp: self.tau_temp,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BankVars {
    pub linear_w: Var,
    pub linear_b: Var,
    pub proto_w1: Var,
    pub proto_w2: Var,
    pub tau_temp: f64,
}

impl BankVars {
    pub fn named(&self) -> [(&'static str, Var); 4] {
        [
            (LINEAR_W, self.linear_w),
            (LINEAR_B, self.linear_b),
            (PROTO_W1, self.proto_w1),
            (PROTO_W2, self.proto_w2),
        ]
    }
}

/// Which head produced a probability map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Linear,
    CosVirtual,
    CosReal,
    CosAvg,
    Corrected,
}

/// Per-pixel class distribution, `C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap<T = f32> {
    pub values: Tensor<T>,
    pub source: HeadKind,
}

fn flat_features<T: Scalar>(tape: &mut Tape<T>, feat: Var) -> Result<(Var, usize, usize)> {
    let (d, h, w) = tape.value(feat).chw()?;
    Ok((tape.reshape(feat, &[d, h * w])?, h, w))
}

fn check_dim<T: Scalar>(tape: &Tape<T>, weights: Var, feat: Var, op: &'static str) -> Result<()> {
    let wd = tape.value(weights).shape()[1];
    let fd = tape.value(feat).shape()[0];
    if wd != fd {
        return Err(Error::dim(op, format!("classifier expects {wd} feature channels, got {fd}")));
    }
    Ok(())
}

/// Records the linear head: per-pixel affine map and class softmax.
pub fn linear_on_tape<T: Scalar>(tape: &mut Tape<T>, feat: Var, w: Var, b: Var) -> Result<Var> {
    check_dim(tape, w, feat, "linear_forward")?;
    let (flat, h, wd) = flat_features(tape, feat)?;
    let c = tape.value(w).shape()[0];
    let logits = tape.matmul(w, flat)?;
    let logits = tape.reshape(logits, &[c, h, wd])?;
    let logits = tape.channel_bias(logits, b)?;
    tape.softmax(logits, 0)
}

/// Records the cosine head: cosine similarity to each prototype row over
/// `tau_temp`, then class softmax. Zero-norm vectors get similarity 0.
pub fn cossim_on_tape<T: Scalar>(tape: &mut Tape<T>, feat: Var, proto: Var, tau_temp: f64) -> Result<Var> {
    if !(tau_temp > 0.0) {
        return Err(Error::Parameter(format!("temperature {tau_temp} must be positive")));
    }
    check_dim(tape, proto, feat, "cossim_forward")?;
    COSSIM_CALLS.with(|c| c.set(c.get() + 1));
    let (flat, h, w) = flat_features(tape, feat)?;
    let c = tape.value(proto).shape()[0];
    let pn = tape.l2_normalize(proto, 1)?;
    let fnorm = tape.l2_normalize(flat, 0)?;
    let sim = tape.matmul(pn, fnorm)?;
    let logits = tape.scale(sim, T::lit(1.0 / tau_temp));
    let logits = tape.reshape(logits, &[c, h, w])?;
    tape.softmax(logits, 0)
}

pub fn linear_forward<T: Scalar>(ft: &FeatureMap<T>, bank: &ClassifierBank<T>) -> Result<ProbabilityMap<T>> {
    let mut tape = Tape::new();
    let f = tape.constant(ft.values.clone());
    let w = tape.constant(bank.linear_w.clone());
    let b = tape.constant(bank.linear_b.clone());
    let p = linear_on_tape(&mut tape, f, w, b)?;
    Ok(ProbabilityMap {
        values: tape.value(p).clone(),
        source: HeadKind::Linear,
    })
}

pub fn cossim_forward<T: Scalar>(
    ft: &FeatureMap<T>,
    proto: &Tensor<T>,
    tau_temp: f64,
    source: HeadKind,
) -> Result<ProbabilityMap<T>> {
    let mut tape = Tape::new();
    let f = tape.constant(ft.values.clone());
    let w = tape.constant(proto.clone());
    let p = cossim_on_tape(&mut tape, f, w, tau_temp)?;
    Ok(ProbabilityMap {
        values: tape.value(p).clone(),
        source,
    })
}

/// `e^{−5(1 − t/t_max)}`.
pub fn lambda_sim(t: usize, t_max: usize) -> Result<f64> {
    if t_max == 0 {
        return Err(Error::Parameter("t_max must be positive".into()));
    }
    let r = (t as f64 / t_max as f64).min(1.0);
    Ok((-5.0 * (1.0 - r)).exp())
}

/// Coefficients `(a, b)` so that the virtual-domain prototypes are
/// `a·W₁ + b·W₂` and the real-domain ones `a·W₂ + b·W₁`.
pub fn blend_coefficients(t: usize, t_max: usize) -> Result<(f64, f64)> {
    let l = lambda_sim(t, t_max)?;
    Ok((2.0 / (3.0 + l), (1.0 + l) / (3.0 + l)))
}

/// Prototype blends `(virtual, real, average)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBlend<T = f32> {
    pub virtual_domain: Tensor<T>,
    pub real_domain: Tensor<T>,
    pub average: Tensor<T>,
}

pub fn blend_weights<T: Scalar>(bank: &ClassifierBank<T>, t: usize, t_max: usize) -> Result<PrototypeBlend<T>> {
    let (a, b) = blend_coefficients(t, t_max)?;
    let (a, b) = (T::lit(a), T::lit(b));
    let half = T::lit(0.5);
    let w1 = &bank.proto_w1;
    let w2 = &bank.proto_w2;
    Ok(PrototypeBlend {
        virtual_domain: w1.zip_with(w2, "blend_weights", |x, y| a * x + b * y)?,
        real_domain: w2.zip_with(w1, "blend_weights", |x, y| a * x + b * y)?,
        average: w1.zip_with(w2, "blend_weights", |x, y| half * x + half * y)?,
    })
}

/// Takes the whole `cosine` pixel where its largest foreground probability
/// exceeds `tau`, and the `linear` pixel elsewhere. Class 0 is background.
pub fn pplc<T: Scalar>(cosine: &ProbabilityMap<T>, linear: &ProbabilityMap<T>, tau: f64) -> Result<ProbabilityMap<T>> {
    let (c, h, w) = cosine.values.chw()?;
    if linear.values.shape() != cosine.values.shape() {
        return Err(Error::dim(
            "pplc",
            format!("maps {:?} and {:?} differ", cosine.values.shape(), linear.values.shape()),
        ));
    }
    if c < 2 {
        return Err(Error::Parameter("correction needs a background and a foreground class".into()));
    }
    let plane = h * w;
    let tau = T::lit(tau);
    let (pc, pl) = (cosine.values.data(), linear.values.data());
    let mut out = pl.to_vec();
    for i in 0..plane {
        let fg = (1..c).map(|k| pc[k * plane + i]).fold(T::neg_infinity(), T::max);
        if fg > tau {
            for k in 0..c {
                out[k * plane + i] = pc[k * plane + i];
            }
        }
    }
    Ok(ProbabilityMap {
        values: Tensor::from_vec([c, h, w], out)?,
        source: HeadKind::Corrected,
    })
}
