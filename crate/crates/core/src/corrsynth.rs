//! Bidirectional correlation maps between a labeled and an unlabeled feature
//! map, and image synthesis that re-renders one image's layout from the other
//! image's pixels.

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Column sums may deviate from 1 by at most this before synthesis refuses
/// the map.
pub const STOCHASTIC_TOL: f64 = 1e-3;

/// Pair of column-stochastic `N×N` maps (`N = W′²`).
///
/// Column `j` of `onto_unlabeled` is a distribution over labeled pixels for unlabeled
/// pixel `j`; `onto_labeled` is the converse.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationPair<T = f32> {
    pub onto_unlabeled: Tensor<T>,
    pub onto_labeled: Tensor<T>,
    pub w_prime: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesizedImage<T = f32> {
    pub values: Tensor<T>,
}

/// Downsamples a `C×H×W` map to `C×W′×W′` and flattens it to `C×W′²`.
fn reduce<T: Scalar>(t: &Tensor<T>, w_prime: usize) -> Result<Tensor<T>> {
    let (c, _, _) = t.chw()?;
    t.resize_bilinear(w_prime, w_prime)?
        .reshape([c, w_prime * w_prime])
}

fn column_softmax<T: Scalar>(logits: &mut [T], n: usize) {
    for j in 0..n {
        let mut m = T::neg_infinity();
        for i in 0..n {
            m = m.max(logits[i * n + j]);
        }
        let mut s = T::zero();
        for i in 0..n {
            let e = (logits[i * n + j] - m).exp();
            logits[i * n + j] = e;
            s = s + e;
        }
        for i in 0..n {
            logits[i * n + j] = logits[i * n + j] / s;
        }
    }
}

/// Builds both correlation maps from (teacher) features.
///
/// Each entry is `⟨f_x(i), f_u(j)⟩/√D′` followed by a softmax over the first
/// index. The reverse map reuses the same products transposed, so swapping
/// the arguments swaps the outputs bit-for-bit.
pub fn compute_bcm<T: Scalar>(
    feat_x: &FeatureMap<T>,
    feat_u: &FeatureMap<T>,
    w_prime: usize,
) -> Result<CorrelationPair<T>> {
    let (dx, hx, wx) = feat_x.values.chw()?;
    let (du, hu, wu) = feat_u.values.chw()?;
    if dx != du {
        return Err(Error::dim(
            "compute_bcm",
            format!("feature channels differ: {dx} vs {du}"),
        ));
    }
    if (hx, wx) != (hu, wu) {
        return Err(Error::dim(
            "compute_bcm",
            format!("feature extents differ: {hx}×{wx} vs {hu}×{wu}"),
        ));
    }
    if w_prime == 0 || w_prime > wx || w_prime > hx {
        return Err(Error::dim(
            "compute_bcm",
            format!("reduced extent {w_prime} must lie in 1..={}", wx.min(hx)),
        ));
    }
    let x = reduce(&feat_x.values, w_prime)?;
    let u = reduce(&feat_u.values, w_prime)?;
    let (onto_unlabeled, onto_labeled) = correlation_maps(&x, &u)?;
    Ok(CorrelationPair { onto_unlabeled, onto_labeled, w_prime })
}

/// Correlation maps for already flattened `D×N` features.
pub fn correlation_maps<T: Scalar>(x: &Tensor<T>, u: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (d, n) = x.hw()?;
    if u.shape() != [d, n] {
        return Err(Error::dim(
            "correlation_maps",
            format!("flattened features {:?} and {:?} differ", x.shape(), u.shape()),
        ));
    }
    let scale = T::lit(1.0 / (d as f64).sqrt());
    let (xd, ud) = (x.data(), u.data());

    // Plain accumulation in channel order keeps the product symmetric
    // under argument exchange.
    let mut logits = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = T::zero();
            for k in 0..d {
                acc = acc + xd[k * n + i] * ud[k * n + j];
            }
            logits[i * n + j] = acc * scale;
        }
    }
    let mut reverse = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            reverse[j * n + i] = logits[i * n + j];
        }
    }
    column_softmax(&mut logits, n);
    column_softmax(&mut reverse, n);
    Ok((Tensor::from_vec([n, n], logits)?, Tensor::from_vec([n, n], reverse)?))
}

/// `D×N` source pixels times a column-stochastic `N×N` map.
pub fn render<T: Scalar>(flat: &Tensor<T>, corr: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, n2] = corr.shape()[..] else {
        return Err(Error::dim(
            "synthesize",
            format!("correlation map must be square, got {:?}", corr.shape()),
        ));
    };
    if n != n2 {
        return Err(Error::dim(
            "synthesize",
            format!("correlation map must be square, got {:?}", corr.shape()),
        ));
    }
    let cd = corr.data();
    for j in 0..n {
        let s: f64 = (0..n).map(|i| cd[i * n + j].to_f64().unwrap()).sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL || !s.is_finite() {
            return Err(Error::Contract(format!(
                "correlation column {j} sums to {s}, not 1"
            )));
        }
    }
    if !flat.all_finite() {
        return Err(Error::Contract("synthesis source has non-finite pixels".into()));
    }
    flat.matmul(corr)
}

/// Re-renders `image` through `corr`: the image is reduced to `W′×W′`,
/// flattened to `D×N`, multiplied by `corr`, and upsampled to the target size.
///
/// Returns the pre-upsampling `D×W′×W′` rendering alongside the result.
pub fn synthesize_with_reduced<T: Scalar>(
    image: &Tensor<T>,
    corr: &Tensor<T>,
    target_h: usize,
    target_w: usize,
) -> Result<(SynthesizedImage<T>, Tensor<T>)> {
    let (d, _, _) = image.chw()?;
    let n = corr.shape().first().copied().unwrap_or(0);
    let w_prime = (n as f64).sqrt().round() as usize;
    if w_prime * w_prime != n {
        return Err(Error::dim(
            "synthesize",
            format!("correlation map {:?} is not W′²×W′²", corr.shape()),
        ));
    }
    let flat = reduce(image, w_prime)?;
    let mixed = render(&flat, corr)?.reshape([d, w_prime, w_prime])?;
    let up = mixed.resize_bilinear(target_h, target_w)?;
    Ok((SynthesizedImage { values: up }, mixed))
}

pub fn synthesize<T: Scalar>(
    image: &Tensor<T>,
    corr: &Tensor<T>,
    target_h: usize,
    target_w: usize,
) -> Result<SynthesizedImage<T>> {
    synthesize_with_reduced(image, corr, target_h, target_w).map(|(s, _)| s)
}

/// The two synthesized images of one labeled/unlabeled pair.
#[derive(Clone, Debug)]
pub struct CrossSynthesis<T = f32> {
    /// Labeled layout rendered with unlabeled pixels.
    pub x_from_u: SynthesizedImage<T>,
    /// Unlabeled layout rendered with labeled pixels.
    pub u_from_x: SynthesizedImage<T>,
    pub corr: CorrelationPair<T>,
}

pub fn cross_synthesize<T: Scalar>(
    x: &Tensor<T>,
    u: &Tensor<T>,
    feat_x: &FeatureMap<T>,
    feat_u: &FeatureMap<T>,
    w_prime: usize,
) -> Result<CrossSynthesis<T>> {
    let corr = compute_bcm(feat_x, feat_u, w_prime)?;
    let (_, h, w) = x.chw()?;
    let (_, hu, wu) = u.chw()?;
    let x_from_u = synthesize(u, &corr.onto_labeled, h, w)?;
    let u_from_x = synthesize(x, &corr.onto_unlabeled, hu, wu)?;
    Ok(CrossSynthesis {
        x_from_u,
        u_from_x,
        corr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn fm(values: Tensor<f64>) -> FeatureMap<f64> {
        FeatureMap { values }
    }

    #[test]
    fn identical_constant_features_give_uniform_maps() {
        let f = fm(Tensor::from_fn([3, 8, 8], |i| [0.3, -1.0, 2.0][i / 64]));
        let c = compute_bcm(&f, &f, 4).unwrap();
        for v in c.onto_unlabeled.data().iter().chain(c.onto_labeled.data()) {
            assert!((v - 1.0 / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_pixel_hand_case() {
        let x = Tensor::<f64>::from_f64([1, 2], &[1.0, 0.0]).unwrap();
        let (onto_unlabeled, _) = correlation_maps(&x, &x).unwrap();
        let e = std::f64::consts::E;
        // column 0: [e/(e+1), 1/(e+1)], column 1: [0.5, 0.5]
        let expect = [e / (e + 1.0), 0.5, 1.0 / (e + 1.0), 0.5];
        for (g, w) in onto_unlabeled.data().iter().zip(expect) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn full_scale_map_shape() {
        let f = fm(Tensor::zeros([2, 256, 256]));
        let c = compute_bcm(&f, &f, 64).unwrap();
        assert_eq!(c.onto_unlabeled.shape(), &[4096, 4096]);
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let a = fm(Tensor::zeros([2, 8, 8]));
        let b = fm(Tensor::zeros([3, 8, 8]));
        assert!(matches!(compute_bcm(&a, &b, 4), Err(Error::Dimension { .. })));
    }

    #[test]
    fn swap_symmetry_is_exact() {
        let mut rng = Rng::new(11);
        let a = fm(Tensor::from_fn([4, 8, 8], |_| rng.normal()));
        let b = fm(Tensor::from_fn([4, 8, 8], |_| rng.normal()));
        let ab = compute_bcm(&a, &b, 4).unwrap();
        let ba = compute_bcm(&b, &a, 4).unwrap();
        assert_eq!(ab.onto_unlabeled, ba.onto_labeled);
        assert_eq!(ab.onto_labeled, ba.onto_unlabeled);
    }

    #[test]
    fn uniform_corr_renders_channel_mean() {
        let img = Tensor::<f64>::from_fn([2, 4, 4], |i| i as f64);
        let n = 4;
        let corr = Tensor::full([n, n], 1.0 / n as f64);
        let (_, reduced) = synthesize_with_reduced(&img, &corr, 4, 4).unwrap();
        let down = img.resize_bilinear(2, 2).unwrap();
        for c in 0..2 {
            let mean: f64 = down.data()[c * 4..(c + 1) * 4].iter().sum::<f64>() / 4.0;
            for v in &reduced.data()[c * 4..(c + 1) * 4] {
                assert!((v - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_corr_is_down_then_up() {
        let img = Tensor::<f64>::from_fn([1, 8, 8], |i| (i as f64 * 0.37).sin());
        let n = 16;
        let eye = Tensor::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
        let s = synthesize(&img, &eye, 8, 8).unwrap();
        let expect = img.resize_bilinear(4, 4).unwrap().resize_bilinear(8, 8).unwrap();
        assert!(s.values.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn hand_product_before_upsampling() {
        let src = Tensor::<f64>::from_f64([1, 2], &[0.0, 10.0]).unwrap();
        let a = 0.7311;
        let corr = Tensor::<f64>::from_f64([2, 2], &[a, 0.5, 1.0 - a, 0.5]).unwrap();
        let out = render(&src, &corr).unwrap();
        assert!((out.data()[0] - 2.689).abs() < 1e-9);
        assert!((out.data()[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn non_stochastic_map_rejected() {
        let img = Tensor::<f64>::zeros([1, 4, 4]);
        let corr = Tensor::full([4, 4], 0.3);
        assert!(matches!(synthesize(&img, &corr, 4, 4), Err(Error::Contract(_))));
    }
}
