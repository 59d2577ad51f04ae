//! Small U-Net style encoder–decoder producing per-pixel feature vectors,
//! plus the exponential-moving-average update used for the teacher.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;

/// Network shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arch {
    pub in_channels: usize,
    /// Number of 2× downsamplings.
    pub levels: usize,
    pub base_channels: usize,
    /// Output feature channels.
    pub feature_dim: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            in_channels: 1,
            levels: 3,
            base_channels: 8,
            feature_dim: 16,
        }
    }
}

impl Arch {
    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial extents must be a multiple of this.
    pub fn required_multiple(&self) -> usize {
        1 << self.levels
    }

    /// `(name, shape)` of every parameter, in a fixed order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
            out.push((format!("{name}.w"), vec![cout, cin, k, k]));
            out.push((format!("{name}.b"), vec![cout]));
        };
        for l in 0..=self.levels {
            let cin = if l == 0 { self.in_channels } else { self.channels(l - 1) };
            conv(format!("enc{l}.c0"), cin, self.channels(l), 3);
            conv(format!("enc{l}.c1"), self.channels(l), self.channels(l), 3);
        }
        for l in (0..self.levels).rev() {
            let cin = self.channels(l + 1) + self.channels(l);
            conv(format!("dec{l}.c0"), cin, self.channels(l), 3);
            conv(format!("dec{l}.c1"), self.channels(l), self.channels(l), 3);
        }
        conv("head".to_string(), self.channels(0), self.feature_dim, 1);
        out
    }
}

/// Named backbone parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T = f32> {
    pub arch: Arch,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

/// Backbone output at input resolution, `D′×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    pub values: Tensor<T>,
}

impl<T: Scalar> BackboneParams<T> {
    /// He-normal kernels, zero biases.
    pub fn init(arch: Arch, rng: &mut Rng) -> Self {
        let tensors = arch
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = if shape.len() == 4 {
                    let fan_in = shape[1] * shape[2] * shape[3];
                    let gain = (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt();
                    Tensor::from_fn(shape, |_| T::lit(rng.normal() * gain))
                } else {
                    Tensor::zeros(shape)
                };
                (name, t)
            })
            .collect();
        BackboneParams { arch, tensors }
    }

    pub fn zeros(arch: Arch) -> Self {
        let tensors = arch
            .layout()
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(shape)))
            .collect();
        BackboneParams { arch, tensors }
    }

    /// Registers every tensor on `tape`, trainable or frozen.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> BackboneVars {
        BackboneVars {
            arch: self.arch,
            vars: self
                .tensors
                .iter()
                .map(|(name, t)| {
                    let v = if trainable {
                        tape.param(t.clone())
                    } else {
                        tape.constant(t.clone())
                    };
                    (name.clone(), v)
                })
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> BackboneParams<U> {
        BackboneParams {
            arch: self.arch,
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Tape handles for a registered [`BackboneParams`].
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub arch: Arch,
    pub vars: BTreeMap<String, Var>,
}

impl BackboneVars {
    fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing backbone parameter {name}")))
    }

    fn conv<T: Scalar>(&self, tape: &mut Tape<T>, name: &str, x: Var, act: bool) -> Result<Var> {
        let w = self.get(&format!("{name}.w"))?;
        let b = self.get(&format!("{name}.b"))?;
        let k = tape.value(w).shape()[2];
        let y = tape.conv2d(x, w, 1, k / 2)?;
        let y = tape.channel_bias(y, b)?;
        Ok(if act {
            tape.leaky_relu(y, T::lit(LEAKY_SLOPE))
        } else {
            y
        })
    }

    /// Records a forward pass of `image` (`D×H×W`) and returns the feature
    /// map node (`D′×H×W`).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, image: Var) -> Result<Var> {
        let arch = self.arch;
        let (c, h, w) = tape.value(image).chw()?;
        if c != arch.in_channels {
            return Err(Error::dim(
                "backbone",
                format!("expected {} input channels, got {c}", arch.in_channels),
            ));
        }
        let mult = arch.required_multiple();
        if h % mult != 0 || w % mult != 0 || h == 0 || w == 0 {
            return Err(Error::dim(
                "backbone",
                format!("input {h}×{w} must be a positive multiple of {mult} in both extents"),
            ));
        }
        let mut skips = Vec::with_capacity(arch.levels);
        let mut x = image;
        for l in 0..=arch.levels {
            x = self.conv(tape, &format!("enc{l}.c0"), x, true)?;
            x = self.conv(tape, &format!("enc{l}.c1"), x, true)?;
            if l < arch.levels {
                skips.push(x);
                x = tape.maxpool2(x)?;
            }
        }
        for l in (0..arch.levels).rev() {
            let skip = skips[l];
            let (_, sh, sw) = tape.value(skip).chw()?;
            let up = tape.resize_bilinear(x, sh, sw)?;
            x = tape.concat(&[up, skip])?;
            x = self.conv(tape, &format!("dec{l}.c0"), x, true)?;
            x = self.conv(tape, &format!("dec{l}.c1"), x, true)?;
        }
        self.conv(tape, "head", x, false)
    }
}

/// Eager forward pass without gradient tracking.
pub fn forward<T: Scalar>(params: &BackboneParams<T>, image: &Tensor<T>) -> Result<FeatureMap<T>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let x = tape.constant(image.clone());
    let out = vars.forward(&mut tape, x)?;
    Ok(FeatureMap {
        values: tape.value(out).clone(),
    })
}

/// Moves every `teacher` tensor towards `student`:
/// `teacher ← decay·teacher + (1−decay)·student`.
///
/// Written as `teacher + (1−decay)(student − teacher)` so equal inputs are an
/// exact fixed point.
pub fn ema_update_tensors<T: Scalar>(
    teacher: &mut BTreeMap<String, Tensor<T>>,
    student: &BTreeMap<String, Tensor<T>>,
    decay: f64,
) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Parameter(format!("EMA decay {decay} outside [0, 1)")));
    }
    if teacher.len() != student.len() {
        let missing = student
            .keys()
            .find(|k| !teacher.contains_key(*k))
            .or_else(|| teacher.keys().find(|k| !student.contains_key(*k)));
        return Err(Error::Contract(format!(
            "EMA structure mismatch at layer {}",
            missing.map(String::as_str).unwrap_or("?")
        )));
    }
    for (name, s) in student {
        let t = teacher
            .get(name)
            .ok_or_else(|| Error::Contract(format!("EMA structure mismatch at layer {name}")))?;
        if t.shape() != s.shape() {
            return Err(Error::Contract(format!(
                "EMA structure mismatch at layer {name}: {:?} vs {:?}",
                t.shape(),
                s.shape()
            )));
        }
    }
    let rate = T::lit(1.0 - decay);
    for (name, s) in student {
        let t = teacher.get_mut(name).expect("checked above");
        if decay == 0.0 {
            t.data_mut().copy_from_slice(s.data());
            continue;
        }
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = *tv + rate * (sv - *tv);
        }
    }
    Ok(())
}

pub fn ema_update<T: Scalar>(
    teacher: &mut BackboneParams<T>,
    student: &BackboneParams<T>,
    decay: f64,
) -> Result<()> {
    if teacher.arch != student.arch {
        return Err(Error::Contract(format!(
            "EMA architecture mismatch: {:?} vs {:?}",
            teacher.arch, student.arch
        )));
    }
    ema_update_tensors(&mut teacher.tensors, &student.tensors, decay)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> Arch {
        Arch {
            in_channels: 1,
            levels: 2,
            base_channels: 4,
            feature_dim: 5,
        }
    }

    #[test]
    fn zero_everything_gives_zero_features() {
        let p = BackboneParams::<f32>::zeros(small_arch());
        let f = forward(&p, &Tensor::zeros([1, 8, 8])).unwrap();
        assert_eq!(f.values.shape(), &[5, 8, 8]);
        assert!(f.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_shape_contract() {
        let p = BackboneParams::<f32>::init(Arch::default(), &mut Rng::new(1));
        let f = forward(&p, &Tensor::zeros([1, 64, 64])).unwrap();
        assert_eq!(f.values.shape(), &[16, 64, 64]);
    }

    #[test]
    fn indivisible_input_names_multiple() {
        let p = BackboneParams::<f32>::zeros(Arch::default());
        let err = forward(&p, &Tensor::zeros([1, 20, 16])).unwrap_err();
        assert!(err.to_string().contains('8'), "{err}");
    }

    #[test]
    fn flip_symmetric_kernels_commute_with_hflip() {
        let arch = small_arch();
        let mut rng = Rng::new(3);
        let mut p = BackboneParams::<f64>::init(arch, &mut rng);
        for (name, t) in p.tensors.iter_mut() {
            if name.ends_with(".w") {
                let k = t.shape()[3];
                let planes = t.len() / (k * k);
                let d = t.data_mut();
                for pl in 0..planes {
                    for y in 0..k {
                        for x in 0..k / 2 {
                            let a = pl * k * k + y * k + x;
                            let b = pl * k * k + y * k + (k - 1 - x);
                            d[b] = d[a];
                        }
                    }
                }
            } else {
                for v in t.data_mut() {
                    *v = rng.normal() * 0.1;
                }
            }
        }
        let img = Tensor::<f64>::from_fn([1, 8, 12], |i| ((i * 31 % 17) as f64) / 17.0 - 0.5);
        let flip = |t: &Tensor<f64>| {
            let (c, h, w) = t.chw().unwrap();
            Tensor::from_fn([c, h, w], |i| {
                let (ch, rem) = (i / (h * w), i % (h * w));
                let (y, x) = (rem / w, rem % w);
                t.data()[ch * h * w + y * w + (w - 1 - x)]
            })
        };
        let a = flip(&forward(&p, &img).unwrap().values);
        let b = forward(&p, &flip(&img)).unwrap().values;
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn ema_cases() {
        let arch = small_arch();
        let student = BackboneParams::<f64>::init(arch, &mut Rng::new(1));
        let mut teacher = BackboneParams::<f64>::init(arch, &mut Rng::new(2));
        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(teacher, student);

        let before = teacher.clone();
        ema_update(&mut teacher, &student, 0.99).unwrap();
        assert_eq!(teacher, before);

        assert!(ema_update(&mut teacher, &student, 1.0).is_err());
        let mut broken = student.clone();
        broken.tensors.remove("head.b");
        let err = ema_update_tensors(&mut broken.tensors.clone(), &student.tensors, 0.5).unwrap_err();
        assert!(err.to_string().contains("head.b"), "{err}");
    }

    #[test]
    fn ema_distance_decays_geometrically() {
        let arch = small_arch();
        let target = BackboneParams::<f64>::init(arch, &mut Rng::new(5));
        let mut teacher = BackboneParams::<f64>::init(arch, &mut Rng::new(6));
        let dist = |a: &BackboneParams<f64>| -> f64 {
            a.tensors
                .iter()
                .map(|(k, t)| {
                    t.sub(&target.tensors[k]).unwrap().data().iter().map(|v| v * v).sum::<f64>()
                })
                .sum::<f64>()
                .sqrt()
        };
        let d = 0.9;
        let mut prev = dist(&teacher);
        for _ in 0..10 {
            ema_update(&mut teacher, &target, d).unwrap();
            let now = dist(&teacher);
            assert!((now / prev - d).abs() < 1e-9, "ratio {}", now / prev);
            prev = now;
        }
    }
}
