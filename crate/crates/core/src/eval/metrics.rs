//! Overlap and boundary-distance metrics on binary masks.

use crate::error::{Error, Result};

/// Binary mask in row-major order.
#[derive(Clone, Copy, Debug)]
pub struct MaskRef<'a> {
    pub data: &'a [bool],
    pub h: usize,
    pub w: usize,
}

impl<'a> MaskRef<'a> {
    pub fn new(data: &'a [bool], h: usize, w: usize) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::dim("mask", format!("{} values for {h}×{w}", data.len())));
        }
        Ok(MaskRef { data, h, w })
    }

    fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    fn diagonal(&self) -> f64 {
        ((self.h * self.h + self.w * self.w) as f64).sqrt()
    }
}

fn same_shape(a: &MaskRef, b: &MaskRef, op: &'static str) -> Result<()> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::dim(op, format!("masks {}×{} and {}×{} differ", a.h, a.w, b.h, b.w)));
    }
    Ok(())
}

/// `(dice, jaccard)`; both empty counts as perfect agreement.
pub fn overlap_metrics(pred: MaskRef, gt: MaskRef) -> Result<(f64, f64)> {
    same_shape(&pred, &gt, "overlap_metrics")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(gt.data) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        return Ok((1.0, 1.0));
    }
    let j = inter as f64 / union as f64;
    Ok((2.0 * j / (1.0 + j), j))
}

/// Foreground pixels with a 4-neighbour outside the mask or the image.
pub fn boundary(mask: MaskRef) -> Vec<bool> {
    let (h, w) = (mask.h, mask.w);
    let at = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.data[y as usize * w + x as usize]
    };
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

const FAR: f64 = 1e20;

/// One pass of the lower-envelope squared distance transform.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else if s <= z[k] {
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// pixel of `features`.
pub fn squared_distance_transform(features: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = features.iter().map(|&f| if f { 0.0 } else { FAR }).collect();
    let n = h.max(w);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Distances from each boundary pixel of `from` to the boundary of `to`.
pub fn directed_surface_distances(from: &[bool], to: &[bool], h: usize, w: usize) -> Vec<f64> {
    let dt = squared_distance_transform(to, h, w);
    from.iter()
        .zip(&dt)
        .filter(|(&b, _)| b)
        .map(|(_, &d)| d.sqrt())
        .collect()
}

/// Nearest-rank percentile of unsorted `values` (non-empty).
pub fn nearest_rank(values: &mut [f64], pct: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * values.len() as f64).ceil().max(1.0) as usize;
    values[rank.min(values.len()) - 1]
}

/// How the 95th percentile combines the two directions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Hd95Mode {
    /// Larger of the two directed percentiles.
    #[default]
    Directed,
    /// Percentile of both directions' distances together.
    Pooled,
}

/// `(hd95, asd)` in pixels. Both empty gives zeros; exactly one empty gives
/// the image diagonal for both.
pub fn surface_metrics(pred: MaskRef, gt: MaskRef, mode: Hd95Mode) -> Result<(f64, f64)> {
    same_shape(&pred, &gt, "surface_metrics")?;
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok((0.0, 0.0)),
        (true, false) | (false, true) => {
            let d = pred.diagonal();
            return Ok((d, d));
        }
        _ => {}
    }
    let (h, w) = (pred.h, pred.w);
    let bp = boundary(pred);
    let bg = boundary(gt);
    let mut a = directed_surface_distances(&bp, &bg, h, w);
    let mut b = directed_surface_distances(&bg, &bp, h, w);
    let asd = (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (a.len() + b.len()) as f64;
    let hd95 = match mode {
        Hd95Mode::Directed => nearest_rank(&mut a, 95.0).max(nearest_rank(&mut b, 95.0)),
        Hd95Mode::Pooled => {
            a.extend_from_slice(&b);
            nearest_rank(&mut a, 95.0)
        }
    };
    Ok((hd95, asd))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Vec<bool> {
        let mut m = vec![false; h * w];
        for &(y, x) in on {
            m[y * w + x] = true;
        }
        m
    }

    #[test]
    fn overlap_cases() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let b = mask(4, 4, &[(0, 1), (0, 2), (1, 1), (1, 2)]);
        let (d, j) = overlap_metrics(MaskRef::new(&a, 4, 4).unwrap(), MaskRef::new(&b, 4, 4).unwrap()).unwrap();
        assert!((d - 0.5).abs() < 1e-15 && (j - 1.0 / 3.0).abs() < 1e-15);
        fn m(v: &[bool]) -> MaskRef<'_> {
            MaskRef::new(v, 4, 4).unwrap()
        }
        assert_eq!(overlap_metrics(m(&a), m(&a)).unwrap(), (1.0, 1.0));
        let e = vec![false; 16];
        assert_eq!(overlap_metrics(m(&e), m(&e)).unwrap(), (1.0, 1.0));
        assert_eq!(overlap_metrics(m(&a), m(&e)).unwrap(), (0.0, 0.0));
        let far = mask(4, 4, &[(3, 3)]);
        assert_eq!(overlap_metrics(m(&a), m(&far)).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn surface_cases() {
        fn m(v: &[bool]) -> MaskRef<'_> {
            MaskRef::new(v, 5, 8).unwrap()
        }
        let a = mask(5, 8, &[(2, 1)]);
        let b = mask(5, 8, &[(2, 4)]);
        assert_eq!(surface_metrics(m(&a), m(&b), Hd95Mode::Directed).unwrap(), (3.0, 3.0));
        assert_eq!(surface_metrics(m(&a), m(&a), Hd95Mode::Directed).unwrap(), (0.0, 0.0));
        let e = vec![false; 40];
        assert_eq!(surface_metrics(m(&e), m(&e), Hd95Mode::Directed).unwrap(), (0.0, 0.0));
        let diag = (25.0f64 + 64.0).sqrt();
        assert_eq!(surface_metrics(m(&a), m(&e), Hd95Mode::Directed).unwrap(), (diag, diag));
        let wrong = vec![false; 16];
        assert!(surface_metrics(m(&a), MaskRef::new(&wrong, 4, 4).unwrap(), Hd95Mode::Directed).is_err());
    }

    #[test]
    fn nearest_rank_convention() {
        let mut v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(nearest_rank(&mut v, 95.0), 19.0);
        assert_eq!(nearest_rank(&mut [4.0], 95.0), 4.0);
    }

    #[test]
    fn boundary_counts_image_edge_as_outside() {
        let full = vec![true; 9];
        let b = boundary(MaskRef::new(&full, 3, 3).unwrap());
        assert_eq!(b, mask(3, 3, &[(0, 0), (0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1), (2, 2)]));
    }
}
