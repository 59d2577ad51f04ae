#![allow(dead_code)]

use std::path::{Path, PathBuf};

use corrmix::synthdata::{gen_dataset, DomainSpec, GenConfig};
use corrmix::trainer::TrainConfig;
use corrmix::{Result, Rng, Tape, Tensor, Var};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both are ~0.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let den = norm(a).max(norm(b));
    if den < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / den
    }
}

/// Per-tensor relative error between tape gradients and central differences
/// of the scalar `f` at `params`.
pub fn gradient_errors(
    params: &[Tensor<f64>],
    h: f64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| match tape.grad(v) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; p.len()],
        })
        .collect();
    let eval = |ps: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
        let o = f(&mut t, &vs).unwrap();
        t.value(o).item()
    };
    let mut work = params.to_vec();
    let mut errs = Vec::new();
    for k in 0..params.len() {
        let mut numeric = vec![0.0; params[k].len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work);
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work);
            work[k].data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        errs.push(rel_err(&analytic[k], &numeric));
    }
    errs
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_range(lo, hi))
}

/// Random per-pixel class distribution, `C×H×W`.
pub fn random_probs(c: usize, h: usize, w: usize, rng: &mut Rng) -> Tensor<f64> {
    let logits = random_tensor(&[c, h, w], rng, -3.0, 3.0);
    logits.softmax(0).unwrap()
}

/// Boundary by definition: foreground with a 4-neighbour that is background
/// or off the image.
fn brute_boundary(m: &[bool], h: usize, w: usize) -> Vec<(i64, i64)> {
    let on = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && m[(y as usize) * w + x as usize];
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if on(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !on(y + dy, x + dx)) {
                out.push((y, x));
            }
        }
    }
    out
}

fn directed(from: &[(i64, i64)], to: &[(i64, i64)]) -> Vec<f64> {
    from.iter()
        .map(|&(y, x)| {
            let best = to.iter().map(|&(v, u)| (y - v).pow(2) + (x - u).pow(2)).min().unwrap();
            (best as f64).sqrt()
        })
        .collect()
}

fn p95(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = ((0.95 * v.len() as f64).ceil() as usize).max(1);
    v[rank - 1]
}

/// All-pairs `(hd95, asd)` with the diagonal penalty for one empty mask.
pub fn brute_surface(p: &[bool], g: &[bool], h: usize, w: usize) -> (f64, f64) {
    let (pe, ge) = (!p.contains(&true), !g.contains(&true));
    if pe && ge {
        return (0.0, 0.0);
    }
    if pe || ge {
        let d = ((h * h + w * w) as f64).sqrt();
        return (d, d);
    }
    let (bp, bg) = (brute_boundary(p, h, w), brute_boundary(g, h, w));
    let a = directed(&bp, &bg);
    let b = directed(&bg, &bp);
    let asd = (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (a.len() + b.len()) as f64;
    (p95(a).max(p95(b)), asd)
}

/// Random mask: a few rectangles plus scattered pixels.
pub fn random_mask(h: usize, w: usize, rng: &mut Rng) -> Vec<bool> {
    let mut m = vec![false; h * w];
    for _ in 0..rng.below(4) {
        let (y0, x0) = (rng.below(h), rng.below(w));
        let (y1, x1) = ((y0 + 1 + rng.below(h / 2 + 1)).min(h), (x0 + 1 + rng.below(w / 2 + 1)).min(w));
        for y in y0..y1 {
            for x in x0..x1 {
                m[y * w + x] = true;
            }
        }
    }
    let density = rng.uniform_range(0.0, 0.1);
    for v in m.iter_mut() {
        if rng.bernoulli(density) {
            *v = !*v;
        }
    }
    m
}

/// Small network and short schedule for training tests on 32×32 images.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        base_channels: 2,
        feature_dim: 4,
        levels: 2,
        batch_size: 4,
        t_max: 20,
        ..TrainConfig::default()
    }
}

/// Writes a 3-domain 32×32 dataset and returns the manifest path.
pub fn tiny_dataset(dir: &Path) -> PathBuf {
    let cfg = GenConfig {
        h: 32,
        w: 32,
        train_per_domain: 6,
        test_per_domain: 2,
        labeled_count: 3,
        ..GenConfig::default()
    };
    gen_dataset(&DomainSpec::presets(), &cfg, dir).unwrap();
    dir.join("manifest.tsv")
}

/// Gradient errors of the full student objective, per model tensor, on a
/// 2-class 8×8 pair through a 2-level network in 64-bit arithmetic.
pub fn objective_gradient_errors(h: f64) -> Vec<(String, f64)> {
    use corrmix::synthdata::Sample;
    use corrmix::trainer::{prepare_batch, student_objective, Model, TrainState};

    let cfg = TrainConfig {
        base_channels: 2,
        feature_dim: 4,
        levels: 2,
        batch_size: 2,
        tau: 0.3,
        tau_temp: 0.5,
        t_max: 10,
        ..TrainConfig::default()
    };
    let mut rng = Rng::new(11);
    let sample = |domain: u32, rng: &mut Rng| Sample {
        image: Tensor::from_fn([1, 8, 8], |_| rng.uniform_range(-1.0, 1.0) as f32),
        mask: Tensor::from_fn([8, 8], |i| u8::from((2..6).contains(&(i / 8)) && (1..5).contains(&(i % 8)))),
        domain,
    };
    let (x, u) = (sample(0, &mut rng), sample(1, &mut rng));
    let state = TrainState::new(&cfg).unwrap();
    let t = 4;
    let prepared = prepare_batch(&state.teacher, &[&x], &[&u], &cfg, t, &TrainState::step_rng(&cfg, t))
        .unwrap()
        .cast::<f64>();
    let mut student: Model<f64> = state.student.cast();
    // keep every feature vector well away from zero norm, where the cosine
    // head is too curved for central differences
    for v in student.get_mut("head.b").unwrap().data_mut() {
        *v = rng.uniform_range(0.2, 0.4) * if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
    }

    let mut tape = Tape::new();
    let obj = student_objective(&mut tape, &student, &prepared, &cfg, t).unwrap();
    tape.backward(obj.total).unwrap();
    let loss = |m: &Model<f64>| -> f64 {
        let mut tp = Tape::new();
        let o = student_objective(&mut tp, m, &prepared, &cfg, t).unwrap();
        tp.value(o.total).item()
    };
    let mut work = student.clone();
    obj.params
        .named()
        .into_iter()
        .map(|(name, var)| {
            let analytic = tape.grad(var).map(|g| g.data().to_vec()).unwrap_or_default();
            let n = work.get_mut(&name).unwrap().len();
            let mut numeric = vec![0.0; n];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let orig = work.get_mut(&name).unwrap().data()[i];
                work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
                let up = loss(&work);
                work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
                let down = loss(&work);
                work.get_mut(&name).unwrap().data_mut()[i] = orig;
                *slot = (up - down) / (2.0 * h);
            }
            let analytic = if analytic.is_empty() { vec![0.0; n] } else { analytic };
            (name, rel_err(&analytic, &numeric))
        })
        .collect()
}
