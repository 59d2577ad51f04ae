use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n)),
        _ => Err(Error::dim(
            "matmul",
            format!("cannot multiply {a:?} by {b:?}"),
        )),
    }
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
pub(crate) fn axis_split(
    shape: &[usize],
    axis: usize,
    op: &'static str,
) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn softmax_in_place<T: Scalar>(data: &mut [T], outer: usize, n: usize, inner: usize) {
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..inner {
            let mut m = T::neg_infinity();
            for k in 0..n {
                m = m.max(data[base + k * inner + i]);
            }
            let mut s = T::zero();
            for k in 0..n {
                let e = (data[base + k * inner + i] - m).exp();
                data[base + k * inner + i] = e;
                s = s + e;
            }
            for k in 0..n {
                data[base + k * inner + i] = data[base + k * inner + i] / s;
            }
        }
    }
}

pub fn conv_out_extent(extent: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [c_in, h, w] = input[..] else {
            return Err(Error::dim(
                "conv2d",
                format!("input must be C×H×W, got {input:?}"),
            ));
        };
        let [c_out, kc, k, k2] = kernel[..] else {
            return Err(Error::dim(
                "conv2d",
                format!("kernel must be C_out×C_in×k×k, got {kernel:?}"),
            ));
        };
        if kc != c_in {
            return Err(Error::dim(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c_in}"),
            ));
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::dim(
                "conv2d",
                format!("kernel must be square with odd extent, got {k}×{k2}"),
            ));
        }
        let (Some(out_h), Some(out_w)) = (
            conv_out_extent(h, k, stride, padding),
            conv_out_extent(w, k, stride, padding),
        ) else {
            return Err(Error::dim(
                "conv2d",
                format!("{h}×{w} input too small for k={k}, stride={stride}, padding={padding}"),
            ));
        };
        Ok(ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `kk`.
    fn valid_range(&self, kk: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kk as isize - self.padding as isize;
        // need 0 <= o*s + off < extent
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_num = extent as isize - off;
        let hi = if hi_num <= 0 { 0 } else { (hi_num + s - 1) / s };
        let lo = (lo as usize).min(out);
        let hi = (hi as usize).min(out);
        (lo, hi.max(lo))
    }
}

/// Unfolds the input into a `(C_in·k·k) × (out_h·out_w)` patch matrix.
pub(crate) fn im2col<T: Scalar>(g: &ConvGeometry, input: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let mut cols = vec![T::zero(); g.patch() * plane];
    for c in 0..g.c_in {
        let src = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (y0, y1) = g.valid_range(ky, g.h, g.out_h);
            for kx in 0..g.k {
                let (x0, x1) = g.valid_range(kx, g.w, g.out_w);
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let srow = &src[iy * g.w..(iy + 1) * g.w];
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        let ix0 = x0 + kx - g.padding;
                        drow[x0..x1].copy_from_slice(&srow[ix0..ix0 + (x1 - x0)]);
                    } else {
                        for ox in x0..x1 {
                            drow[ox] = srow[ox * g.stride + kx - g.padding];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub(crate) fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let dst = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (y0, y1) = g.valid_range(ky, g.h, g.out_h);
            for kx in 0..g.k {
                let (x0, x1) = g.valid_range(kx, g.w, g.out_w);
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        let ix0 = x0 + kx - g.padding;
                        for (d, &v) in drow[ix0..ix0 + (x1 - x0)].iter_mut().zip(&srow[x0..x1]) {
                            *d = *d + v;
                        }
                    } else {
                        for ox in x0..x1 {
                            let ix = ox * g.stride + kx - g.padding;
                            drow[ix] = drow[ix] + srow[ox];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeometry, input: &[T], kernel: &[T]) -> Vec<T> {
    conv2d_forward_cols(g, input, kernel, false).0
}

fn is_pointwise(g: &ConvGeometry) -> bool {
    g.k == 1 && g.stride == 1 && g.padding == 0
}

/// Forward pass that optionally hands back the patch matrix for reuse in
/// [`conv2d_backward`].
pub(crate) fn conv2d_forward_cols<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    keep: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.c_out * plane];
    if is_pointwise(g) {
        T::gemm(g.c_out, g.c_in, plane, kernel, false, input, false, &mut out, false);
        return (out, None);
    }
    let cols = im2col(g, input);
    T::gemm(g.c_out, g.patch(), plane, kernel, false, &cols, false, &mut out, false);
    (out, keep.then_some(cols))
}

/// Returns `(d_input, d_kernel)` for upstream gradient `dy`.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    dy: &[T],
    cached_cols: Option<&[T]>,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.out_plane();
    let pointwise = is_pointwise(g);
    let mut d_kernel = None;
    if want_kernel {
        let mut dk = vec![T::zero(); g.c_out * g.patch()];
        if pointwise {
            T::gemm(g.c_out, plane, g.c_in, dy, false, input, true, &mut dk, false);
        } else {
            let fresh;
            let cols = match cached_cols {
                Some(c) => c,
                None => {
                    fresh = im2col(g, input);
                    &fresh
                }
            };
            T::gemm(g.c_out, plane, g.patch(), dy, false, cols, true, &mut dk, false);
        }
        d_kernel = Some(dk);
    }
    let mut d_input = None;
    if want_input {
        let mut dcols = vec![T::zero(); g.patch() * plane];
        T::gemm(g.patch(), g.c_out, plane, kernel, true, dy, false, &mut dcols, false);
        d_input = Some(if pointwise { dcols } else { col2im(g, &dcols) });
    }
    (d_input, d_kernel)
}

/// Per-axis sampling table for half-pixel-centre bilinear interpolation.
#[derive(Clone, Debug)]
struct AxisPlan {
    i0: Vec<usize>,
    i1: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisPlan {
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut plan = AxisPlan {
            i0: Vec::with_capacity(dst),
            i1: Vec::with_capacity(dst),
            frac: Vec::with_capacity(dst),
        };
        for d in 0..dst {
            let pos = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            plan.i0.push(i0);
            plan.i1.push(i1);
            plan.frac.push(pos - i0 as f64);
        }
        plan
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ResizePlan {
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    rows: AxisPlan,
    cols: AxisPlan,
}

impl ResizePlan {
    pub fn new(h: usize, w: usize, out_h: usize, out_w: usize) -> Self {
        ResizePlan {
            h,
            w,
            out_h,
            out_w,
            rows: AxisPlan::new(h, out_h),
            cols: AxisPlan::new(w, out_w),
        }
    }

    pub fn forward<T: Scalar>(&self, src: &[T], channels: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(channels * self.out_h * self.out_w);
        let fx: Vec<T> = self.cols.frac.iter().map(|&f| T::lit(f)).collect();
        for c in 0..channels {
            let s = &src[c * self.h * self.w..(c + 1) * self.h * self.w];
            for oy in 0..self.out_h {
                let fy = T::lit(self.rows.frac[oy]);
                let r0 = &s[self.rows.i0[oy] * self.w..][..self.w];
                let r1 = &s[self.rows.i1[oy] * self.w..][..self.w];
                for ox in 0..self.out_w {
                    let (a, b) = (self.cols.i0[ox], self.cols.i1[ox]);
                    let top = r0[a] + (r0[b] - r0[a]) * fx[ox];
                    let bot = r1[a] + (r1[b] - r1[a]) * fx[ox];
                    out.push(top + (bot - top) * fy);
                }
            }
        }
        out
    }

    pub fn backward<T: Scalar>(&self, dy: &[T], channels: usize) -> Vec<T> {
        let mut dx = vec![T::zero(); channels * self.h * self.w];
        for c in 0..channels {
            let d = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            let g = &dy[c * self.out_h * self.out_w..(c + 1) * self.out_h * self.out_w];
            for oy in 0..self.out_h {
                let fy = T::lit(self.rows.frac[oy]);
                let (y0, y1) = (self.rows.i0[oy], self.rows.i1[oy]);
                for ox in 0..self.out_w {
                    let fx = T::lit(self.cols.frac[ox]);
                    let (x0, x1) = (self.cols.i0[ox], self.cols.i1[ox]);
                    let v = g[oy * self.out_w + ox];
                    let one = T::one();
                    d[y0 * self.w + x0] = d[y0 * self.w + x0] + v * (one - fy) * (one - fx);
                    d[y0 * self.w + x1] = d[y0 * self.w + x1] + v * (one - fy) * fx;
                    d[y1 * self.w + x0] = d[y1 * self.w + x0] + v * fy * (one - fx);
                    d[y1 * self.w + x1] = d[y1 * self.w + x1] + v * fy * fx;
                }
            }
        }
        dx
    }
}

/// 2×2 max pooling with stride 2 on a `C×H×W` tensor with even extents.
///
/// Returns the pooled tensor and, per output element, the flat input index of
/// the selected maximum (first in scan order on ties).
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = input.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(
            "maxpool2",
            format!("extents {h}×{w} must be even"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[j] > src[best] {
                        best = j;
                    }
                }
                out.push(src[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::from_vec([c, oh, ow], out)?, idx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_conv_matches_direct_loop() {
        let input = Tensor::<f64>::from_fn([2, 7, 6], |i| ((i * 37 % 11) as f64) - 5.0);
        let kernel = Tensor::<f64>::from_fn([3, 2, 3, 3], |i| ((i * 13 % 7) as f64) * 0.1 - 0.3);
        for (stride, pad) in [(1, 1), (2, 1), (2, 0), (1, 0)] {
            let out = input.conv2d(&kernel, stride, pad).unwrap();
            let (oh, ow) = (out.shape()[1], out.shape()[2]);
            for o in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= 7 || ix >= 6 {
                                        continue;
                                    }
                                    acc += input.data()[c * 42 + iy as usize * 6 + ix as usize]
                                        * kernel.data()[((o * 2 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        let got = out.data()[(o * oh + oy) * ow + ox];
                        assert!((got - acc).abs() < 1e-12, "stride {stride} pad {pad}");
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_picks_first_max() {
        let t = Tensor::<f32>::from_f64([1, 2, 4], &[1.0, 3.0, 2.0, 2.0, 3.0, 0.0, 2.0, 2.0]).unwrap();
        let (p, idx) = maxpool2(&t).unwrap();
        assert_eq!(p.data(), &[3.0, 2.0]);
        assert_eq!(idx, vec![1, 2]);
        assert!(maxpool2(&Tensor::<f32>::zeros([1, 3, 4])).is_err());
    }
}
