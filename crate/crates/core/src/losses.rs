//! Pseudo labels, averaged teacher supervision, confidence filtering and the
//! masked cross-entropy + Dice objective over the four mixed branches.

use crate::error::{Error, Result};
use crate::mixing::{bcmix, CutMask};
use crate::protohead::ProbabilityMap;
use crate::tensor::{DiceReduction, Scalar, Tape, Tensor, Var};

/// One-hot argmax per pixel; ties go to the lowest class index.
pub fn pseudo_label<T: Scalar>(p: &ProbabilityMap<T>) -> Result<Tensor<T>> {
    one_hot_from_probs(&p.values)
}

pub fn one_hot_from_probs<T: Scalar>(p: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = p.chw()?;
    let idx = p.argmax_axis0()?;
    let plane = h * w;
    let mut out = vec![T::zero(); c * plane];
    for (i, &k) in idx.iter().enumerate() {
        out[k * plane + i] = T::one();
    }
    Tensor::from_vec([c, h, w], out)
}

/// One-hot `C×H×W` encoding of an `H×W` label map.
pub fn one_hot<T: Scalar>(labels: &Tensor<u8>, classes: usize) -> Result<Tensor<T>> {
    let (h, w) = labels.hw()?;
    let plane = h * w;
    let mut out = vec![T::zero(); classes * plane];
    for (i, &k) in labels.data().iter().enumerate() {
        let k = k as usize;
        if k >= classes {
            return Err(Error::Contract(format!("label {k} is not below {classes} classes")));
        }
        out[k * plane + i] = T::one();
    }
    Tensor::from_vec([classes, h, w], out)
}

/// Mean of the two corrected teacher maps, or the real-view map alone when
/// both images come from one domain.
pub fn avg_probability<T: Scalar>(
    corrected_virtual: &ProbabilityMap<T>,
    corrected_weak: &ProbabilityMap<T>,
    same_domain: bool,
) -> Result<ProbabilityMap<T>> {
    if corrected_virtual.values.shape() != corrected_weak.values.shape() {
        return Err(Error::dim(
            "avg_probability",
            format!("maps {:?} and {:?} differ", corrected_virtual.values.shape(), corrected_weak.values.shape()),
        ));
    }
    if same_domain {
        return Ok(corrected_weak.clone());
    }
    let half = T::lit(0.5);
    Ok(ProbabilityMap {
        values: corrected_virtual.values.zip_with(&corrected_weak.values, "avg_probability", |a, b| (a + b) * half)?,
        source: corrected_weak.source,
    })
}

/// `H×W` indicator of pixels whose largest class probability exceeds `tau`.
pub fn filter_mask<T: Scalar>(pseudo_probs: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    let (c, h, w) = pseudo_probs.chw()?;
    let plane = h * w;
    let tau = T::lit(tau);
    let d = pseudo_probs.data();
    Ok(Tensor::from_fn([h, w], |i| {
        let m = (0..c).map(|k| d[k * plane + i]).fold(T::neg_infinity(), T::max);
        if m > tau {
            T::one()
        } else {
            T::zero()
        }
    }))
}

pub fn masked_ce<T: Scalar>(y: &Tensor<T>, p: &Tensor<T>, m: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let pv = tape.constant(p.clone());
    let l = tape.masked_ce(pv, y, m)?;
    Ok(tape.value(l).item())
}

pub fn masked_dice<T: Scalar>(y: &Tensor<T>, p: &Tensor<T>, m: &Tensor<T>, reduction: DiceReduction) -> Result<T> {
    let mut tape = Tape::new();
    let pv = tape.constant(p.clone());
    let l = tape.masked_dice(pv, y, m, reduction)?;
    Ok(tape.value(l).item())
}

/// Targets for one branch: one-hot `target`, per-pixel `confidence` and the
/// binary `filter` derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionPack<T = f32> {
    pub target: Tensor<T>,
    pub confidence: Tensor<T>,
    pub filter: Tensor<T>,
}

impl<T: Scalar> SupervisionPack<T> {
    /// Ground truth: full confidence everywhere.
    pub fn labeled(target: Tensor<T>) -> Result<Self> {
        let (_, h, w) = target.chw()?;
        Ok(SupervisionPack {
            confidence: Tensor::ones(target.shape().to_vec()),
            filter: Tensor::ones([h, w]),
            target,
        })
    }

    pub fn pseudo(pseudo_probs: &ProbabilityMap<T>, tau: f64) -> Result<Self> {
        Ok(SupervisionPack {
            target: pseudo_label(pseudo_probs)?,
            confidence: pseudo_probs.values.clone(),
            filter: filter_mask(&pseudo_probs.values, tau)?,
        })
    }

    /// Cuts both packs with `mask` exactly like the images; filters are
    /// recomputed from the mixed confidence.
    pub fn mix(a: &Self, b: &Self, mask: &CutMask, tau: f64) -> Result<(Self, Self)> {
        let (ti, to) = bcmix(&a.target, &b.target, mask)?;
        let (ci, co) = bcmix(&a.confidence, &b.confidence, mask)?;
        let inner = SupervisionPack {
            filter: filter_mask(&ci, tau)?,
            target: ti,
            confidence: ci,
        };
        let outer = SupervisionPack {
            filter: filter_mask(&co, tau)?,
            target: to,
            confidence: co,
        };
        Ok((inner, outer))
    }

    pub fn cast<U: Scalar>(&self) -> SupervisionPack<U> {
        SupervisionPack {
            target: self.target.cast(),
            confidence: self.confidence.cast(),
            filter: self.filter.cast(),
        }
    }
}

/// Branch order in every four-element collection below.
pub const BRANCHES: [&str; 4] = ["in1", "out1", "in2", "out2"];

/// CE + Dice of one prediction against a pack.
pub fn seg_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pack: &SupervisionPack<T>,
    pred: Var,
    dice: DiceReduction,
) -> Result<Var> {
    let ce = tape.masked_ce(pred, &pack.target, &pack.filter)?;
    let dl = tape.masked_dice(pred, &pack.target, &pack.filter, dice)?;
    tape.add(ce, dl)
}

/// Half the linear-head loss plus half the cosine-head loss; the linear
/// loss alone when there is no cosine prediction.
pub fn branch_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pack: &SupervisionPack<T>,
    linear: Var,
    cosine: Option<Var>,
    dice: DiceReduction,
) -> Result<Var> {
    let l = seg_loss_on_tape(tape, pack, linear, dice)?;
    match cosine {
        Some(c) => {
            let c = seg_loss_on_tape(tape, pack, c, dice)?;
            tape.linear_combination(&[(T::lit(0.5), l), (T::lit(0.5), c)])
        }
        None => Ok(l),
    }
}

/// `½(in₁ + out₁) + ½(in₂ + out₂)` over branch losses in [`BRANCHES`] order.
pub fn total_on_tape<T: Scalar>(tape: &mut Tape<T>, branches: [Var; 4]) -> Result<Var> {
    let h = T::lit(0.5);
    tape.linear_combination(&branches.map(|b| (h, b)))
}

/// Eager composite objective. `preds` holds linear then cosine prediction
/// for each branch, in [`BRANCHES`] order.
pub fn composite_loss<T: Scalar>(
    packs: &[SupervisionPack<T>],
    preds: &[ProbabilityMap<T>],
    dice: DiceReduction,
) -> Result<T> {
    if packs.len() != 4 || preds.len() != 8 {
        return Err(Error::Contract(format!(
            "composite loss needs 4 packs and 8 predictions, got {} and {}",
            packs.len(),
            preds.len()
        )));
    }
    let mut tape = Tape::new();
    let mut branch = Vec::with_capacity(4);
    for (k, pack) in packs.iter().enumerate() {
        let l = tape.constant(preds[2 * k].values.clone());
        let c = tape.constant(preds[2 * k + 1].values.clone());
        branch.push(branch_loss_on_tape(&mut tape, pack, l, Some(c), dice)?);
    }
    let total = total_on_tape(&mut tape, [branch[0], branch[1], branch[2], branch[3]])?;
    Ok(tape.value(total).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protohead::HeadKind;

    fn pm(values: Tensor<f64>) -> ProbabilityMap<f64> {
        ProbabilityMap {
            values,
            source: HeadKind::Linear,
        }
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn pseudo_label_cases() {
        let p = pm(t(&[3, 1, 3], &[0.2, 1.0 / 3.0, 0.0, 0.5, 1.0 / 3.0, 1.0, 0.3, 1.0 / 3.0, 0.0]));
        let y = pseudo_label(&p).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(pseudo_label(&pm(y.clone())).unwrap(), y);
    }

    #[test]
    fn averaging_and_same_domain() {
        let a = pm(t(&[2, 1, 1], &[1.0, 0.0]));
        let b = pm(t(&[2, 1, 1], &[0.0, 1.0]));
        assert_eq!(avg_probability(&a, &b, false).unwrap().values.data(), &[0.5, 0.5]);
        assert_eq!(avg_probability(&a, &a, false).unwrap().values, a.values);
        assert_eq!(avg_probability(&a, &b, true).unwrap(), b);
    }

    #[test]
    fn filter_cases() {
        let onehot = t(&[2, 1, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(filter_mask(&onehot, 0.95).unwrap().data(), &[1.0, 1.0]);
        let uniform = Tensor::<f64>::full([2, 2, 2], 0.5);
        assert!(filter_mask(&uniform, 0.95).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ce_and_dice_hand_cases() {
        let y = t(&[2, 1, 1], &[0.0, 1.0]);
        let p = t(&[2, 1, 1], &[0.5, 0.5]);
        let m = t(&[1, 1], &[1.0]);
        assert!((masked_ce(&y, &p, &m).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let eps = 1e-5;
        let expect = 1.0 - (1.0 + eps) / (1.5 + eps);
        let got = masked_dice(&y, &p, &m, DiceReduction::Joint).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.3333).abs() < 1e-4);

        let z = t(&[1, 1], &[0.0]);
        assert_eq!(masked_ce(&y, &p, &z).unwrap(), 0.0);
        assert_eq!(masked_dice(&y, &p, &z, DiceReduction::Joint).unwrap(), 0.0);
        assert!(masked_ce(&y, &y, &m).unwrap() <= 1e-6);
        assert!(masked_dice(&y, &y, &m, DiceReduction::Joint).unwrap() <= 1e-5);
    }

    fn toy_pack() -> SupervisionPack<f64> {
        SupervisionPack::labeled(t(&[2, 2, 2], &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0])).unwrap()
    }

    #[test]
    fn composite_structure() {
        let pack = toy_pack();
        let perfect = pm(pack.target.clone());
        let packs = vec![pack.clone(); 4];
        let preds = vec![perfect.clone(); 8];
        assert!(composite_loss(&packs, &preds, DiceReduction::Joint).unwrap() <= 1e-4);
        assert!(composite_loss(&packs[..3], &preds, DiceReduction::Joint).is_err());

        let soft = pm(Tensor::full([2, 2, 2], 0.5));
        let single = {
            let mut tape = Tape::new();
            let p = tape.constant(soft.values.clone());
            let l = seg_loss_on_tape(&mut tape, &pack, p, DiceReduction::Joint).unwrap();
            tape.value(l).item()
        };
        let total = composite_loss(&packs, &vec![soft.clone(); 8], DiceReduction::Joint).unwrap();
        assert!((total - 2.0 * single).abs() < 1e-12);

        let mut zeroed = pack;
        zeroed.filter = Tensor::zeros([2, 2]);
        let total = composite_loss(&vec![zeroed; 4], &vec![soft; 8], DiceReduction::Joint).unwrap();
        assert_eq!(total, 0.0);
    }

    #[test]
    fn pack_mixing_recomputes_filter() {
        let lab = toy_pack();
        let p = pm(t(&[2, 2, 2], &[0.99, 0.6, 0.5, 0.02, 0.01, 0.4, 0.5, 0.98]));
        let pseudo = SupervisionPack::pseudo(&p, 0.95).unwrap();
        assert_eq!(pseudo.filter.data(), &[1.0, 0.0, 0.0, 1.0]);
        let mask = CutMask::from_rect(2, 2, 0, 0, 1, 2).unwrap();
        let (inner, outer) = SupervisionPack::mix(&lab, &pseudo, &mask, 0.95).unwrap();
        assert_eq!(inner.filter.data(), &[1.0, 1.0, 0.0, 1.0]);
        assert_eq!(outer.filter.data(), &[1.0, 0.0, 1.0, 1.0]);
        assert_eq!(inner.target.data()[..2], lab.target.data()[..2]);
    }
}
