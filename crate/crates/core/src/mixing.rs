//! Augmentation and mixing: weak geometric and strong photometric views,
//! fixed and progressive MixUp towards synthesized images, rectangular cut
//! masks and the two-way CutMix built on them.

use crate::corrsynth::SynthesizedImage;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

/// Largest weak translation as a fraction of the extent.
pub const MAX_SHIFT_FRACTION: f64 = 0.05;
pub const GAMMA_RANGE: (f64, f64) = (0.7, 1.3);
pub const MAX_BRIGHTNESS: f64 = 0.2;
pub const MAX_NOISE_SIGMA: f64 = 0.1;
pub const MASK_AREA_RANGE: (f64, f64) = (0.25, 0.5);
pub const MASK_ASPECT_RANGE: (f64, f64) = (0.5, 2.0);
const MASK_ATTEMPTS: usize = 64;

/// Flips first, then an integer shift with edge replication.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WeakParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub dy: isize,
    pub dx: isize,
}

impl WeakParams {
    pub fn draw(rng: &mut Rng, h: usize, w: usize) -> Self {
        let flip_h = rng.bernoulli(0.5);
        let flip_v = rng.bernoulli(0.5);
        let my = (h as f64 * MAX_SHIFT_FRACTION).floor() as isize;
        let mx = (w as f64 * MAX_SHIFT_FRACTION).floor() as isize;
        let dy = rng.below((2 * my + 1) as usize) as isize - my;
        let dx = rng.below((2 * mx + 1) as usize) as isize - mx;
        WeakParams { flip_h, flip_v, dy, dx }
    }

    /// Applies the transform to every trailing `H×W` plane of `t`.
    pub fn apply<E: Copy>(&self, t: &Tensor<E>) -> Result<Tensor<E>> {
        let (h, w) = plane_dims(t, "weak_augment")?;
        let plane = h * w;
        let src = t.data();
        let mut out = Vec::with_capacity(src.len());
        for p in src.chunks_exact(plane) {
            for y in 0..h {
                let sy = (y as isize - self.dy).clamp(0, h as isize - 1) as usize;
                let sy = if self.flip_v { h - 1 - sy } else { sy };
                for x in 0..w {
                    let sx = (x as isize - self.dx).clamp(0, w as isize - 1) as usize;
                    let sx = if self.flip_h { w - 1 - sx } else { sx };
                    out.push(p[sy * w + sx]);
                }
            }
        }
        Tensor::from_vec(t.shape().to_vec(), out)
    }
}

fn plane_dims<E>(t: &Tensor<E>, op: &'static str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::dim(op, format!("need at least 2 dims, got {s:?}")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

/// Random flips and a small shift, identical for image and label.
pub fn weak_augment<T: Scalar>(
    image: &Tensor<T>,
    label: Option<&Tensor<u8>>,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Option<Tensor<u8>>)> {
    let (h, w) = plane_dims(image, "weak_augment")?;
    if let Some(l) = label {
        if plane_dims(l, "weak_augment")? != (h, w) {
            return Err(Error::dim(
                "weak_augment",
                format!("label {:?} does not match image {:?}", l.shape(), image.shape()),
            ));
        }
    }
    let params = WeakParams::draw(rng, h, w);
    let img = params.apply(image)?;
    let lab = label.map(|l| params.apply(l)).transpose()?;
    Ok((img, lab))
}

/// Photometric jitter on top of an already weak view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrongParams {
    pub gamma: f64,
    pub brightness: f64,
    pub noise_sigma: f64,
}

impl StrongParams {
    pub const IDENTITY: StrongParams = StrongParams {
        gamma: 1.0,
        brightness: 0.0,
        noise_sigma: 0.0,
    };

    pub fn draw(rng: &mut Rng) -> Self {
        StrongParams {
            gamma: rng.uniform_range(GAMMA_RANGE.0, GAMMA_RANGE.1),
            brightness: rng.uniform_range(-MAX_BRIGHTNESS, MAX_BRIGHTNESS),
            noise_sigma: rng.uniform_range(0.0, MAX_NOISE_SIGMA),
        }
    }

    pub fn apply<T: Scalar>(&self, image: &Tensor<T>, rng: &mut Rng) -> Tensor<T> {
        let mut out = image.clone();
        for v in out.data_mut() {
            let mut x = v.to_f64().unwrap_or(0.0);
            if self.gamma != 1.0 {
                let r = ((x + 1.0) * 0.5).clamp(0.0, 1.0);
                x = 2.0 * r.powf(self.gamma) - 1.0;
            }
            x += self.brightness;
            if self.noise_sigma > 0.0 {
                x += self.noise_sigma * rng.normal();
            }
            *v = T::lit(x.clamp(-1.0, 1.0));
        }
        out
    }
}

pub fn strong_augment<T: Scalar>(image: &Tensor<T>, rng: &mut Rng) -> Tensor<T> {
    let params = StrongParams::draw(rng);
    params.apply(image, rng)
}

/// `(1−λ)·real + λ·synth`, clamped into the elementwise hull of the two
/// operands so rounding never leaves it.
pub fn blend<T: Scalar>(real: &Tensor<T>, synth: &Tensor<T>, lambda: f64, op: &'static str) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("{op} ratio {lambda} outside [0, 1]")));
    }
    let (a, b) = (T::lit(1.0 - lambda), T::lit(lambda));
    real.zip_with(synth, op, |r, s| {
        let v = a * r + b * s;
        v.max(r.min(s)).min(r.max(s))
    })
}

pub fn fixmix<T: Scalar>(real: &Tensor<T>, synth: &SynthesizedImage<T>, lambda_fix: f64) -> Result<Tensor<T>> {
    blend(real, &synth.values, lambda_fix, "fixmix")
}

/// Progressive MixUp schedule; the upper bound grows linearly with `t` and
/// saturates at `lambda_fix`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixSchedule {
    pub lambda_fix: f64,
    pub alpha: f64,
    pub t: usize,
    pub t_max: usize,
}

impl MixSchedule {
    pub fn gamma(&self) -> f64 {
        if self.t_max == 0 {
            return self.lambda_fix;
        }
        (self.t as f64 / self.t_max as f64).min(self.lambda_fix)
    }

    /// Draws `γ·λ′` with `λ′ ~ Beta(α, α)`.
    pub fn draw_lambda(&self, rng: &mut Rng) -> Result<f64> {
        if !(self.alpha > 0.0) {
            return Err(Error::Parameter(format!("Beta parameter {} must be positive", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.lambda_fix) {
            return Err(Error::Parameter(format!("lambda_fix {} outside [0, 1]", self.lambda_fix)));
        }
        Ok(self.gamma() * rng.beta(self.alpha, self.alpha)?)
    }
}

/// Returns the mixed image and the drawn ratio.
pub fn pdmix<T: Scalar>(
    real: &Tensor<T>,
    synth: &SynthesizedImage<T>,
    sched: &MixSchedule,
    rng: &mut Rng,
) -> Result<(Tensor<T>, f64)> {
    let lambda = sched.draw_lambda(rng)?;
    Ok((blend(real, &synth.values, lambda, "pdmix")?, lambda))
}

/// Binary `H×W` mask whose ones form one axis-aligned rectangle.
#[derive(Clone, Debug, PartialEq)]
pub struct CutMask {
    pub values: Tensor<f32>,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CutMask {
    pub fn from_rect(h: usize, w: usize, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > h || left + width > w {
            return Err(Error::Parameter(format!(
                "rectangle {height}×{width} at ({top}, {left}) exceeds {h}×{w}"
            )));
        }
        let values = Tensor::from_fn([h, w], |i| {
            let (y, x) = (i / w, i % w);
            let inside = (top..top + height).contains(&y) && (left..left + width).contains(&x);
            if inside {
                1.0
            } else {
                0.0
            }
        });
        Ok(CutMask {
            values,
            top,
            left,
            height,
            width,
        })
    }

    pub fn area_fraction(&self) -> f64 {
        let (h, w) = (self.values.shape()[0], self.values.shape()[1]);
        (self.height * self.width) as f64 / (h * w) as f64
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        self.values.cast()
    }
}

pub fn gen_mask(h: usize, w: usize, rng: &mut Rng) -> Result<CutMask> {
    if h < 4 || w < 4 {
        return Err(Error::Parameter(format!("mask extents {h}×{w} below 4")));
    }
    let total = (h * w) as f64;
    let (lo, hi) = MASK_AREA_RANGE;
    for _ in 0..MASK_ATTEMPTS {
        let frac = rng.uniform_range(lo, hi);
        let ratio = rng.uniform_range(MASK_ASPECT_RANGE.0, MASK_ASPECT_RANGE.1);
        let bh = (frac * total * ratio).sqrt().round() as usize;
        if bh == 0 || bh > h {
            continue;
        }
        let bw = (frac * total / bh as f64).round() as usize;
        if bw == 0 || bw > w {
            continue;
        }
        let got = (bh * bw) as f64 / total;
        if !(lo..=hi).contains(&got) {
            continue;
        }
        let top = rng.below(h - bh + 1);
        let left = rng.below(w - bw + 1);
        return CutMask::from_rect(h, w, top, left, bh, bw);
    }
    let (bh, bw) = (h / 2, w);
    let top = rng.below(h - bh + 1);
    CutMask::from_rect(h, w, top, 0, bh, bw)
}

/// Two-way CutMix: `inner` takes `a` inside the rectangle and `b` outside,
/// `outer` the reverse. Works on any tensor whose trailing two dims match the
/// mask.
pub fn bcmix<E: Copy>(a: &Tensor<E>, b: &Tensor<E>, mask: &CutMask) -> Result<(Tensor<E>, Tensor<E>)> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "bcmix",
            format!("operands {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    let (h, w) = plane_dims(a, "bcmix")?;
    if (h, w) != mask.extents() {
        return Err(Error::dim(
            "bcmix",
            format!("mask {:?} does not match operand {:?}", mask.values.shape(), a.shape()),
        ));
    }
    let m = mask.values.data();
    let plane = h * w;
    let mut inner = Vec::with_capacity(a.len());
    let mut outer = Vec::with_capacity(a.len());
    for (i, (&va, &vb)) in a.data().iter().zip(b.data()).enumerate() {
        if m[i % plane] != 0.0 {
            inner.push(va);
            outer.push(vb);
        } else {
            inner.push(vb);
            outer.push(va);
        }
    }
    Ok((
        Tensor::from_vec(a.shape().to_vec(), inner)?,
        Tensor::from_vec(a.shape().to_vec(), outer)?,
    ))
}
