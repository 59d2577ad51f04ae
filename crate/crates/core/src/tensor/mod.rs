//! Dense row-major tensors and the numeric kernels shared by the eager API
//! and the differentiable [`Tape`].
//!
//! Everything in the pipeline (images, feature maps, probability maps,
//! parameters) is a [`Tensor`]. Training runs in `f32`; gradient checks run
//! the same code in `f64`.

mod io;
mod kernels;
mod rng;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use io::{
    read_header, read_tensor, read_tensors, scan_headers, write_tensor, write_tensors, AnyTensor, DType,
    Element, Header,
};
pub use kernels::{conv_out_extent, maxpool2};
pub use rng::Rng;
pub use tape::{DiceReduction, Tape, Var, DICE_EPS, PROB_FLOOR};

/// Floating point element type usable in differentiable code.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// `c = a·b (+ c)` for row-major operands with optional transposition.
    ///
    /// `a` is `m×k` (or `k×m` when `a_t`), `b` is `k×n` (or `n×k` when `b_t`),
    /// `c` is `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

fn check_gemm<T>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &[T]) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // logical operand is rows×cols; storage is cols×rows when transposed
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_t: bool,
        b: &[f32],
        b_t: bool,
        c: &mut [f32],
        accumulate: bool,
    ) {
        check_gemm(m, k, n, a, b, c);
        if m == 0 || n == 0 {
            return;
        }
        let (rsa, csa) = strides(m, k, a_t);
        let (rsb, csb) = strides(k, n, b_t);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: slice lengths checked above against the extents implied by
        // the strides; all strides are non-negative.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_t: bool,
        b: &[f64],
        b_t: bool,
        c: &mut [f64],
        accumulate: bool,
    ) {
        check_gemm(m, k, n, a, b, c);
        if m == 0 || n == 0 {
            return;
        }
        let (rsa, csa) = strides(m, k, a_t);
        let (rsb, csb) = strides(k, n, b_t);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: as for f32.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Dense N-dimensional array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T> Tensor<T> {
    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "from_vec",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Extents of a `C×H×W` tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::dim(
                "chw",
                format!("expected rank-3 C×H×W, got {:?}", self.shape),
            )),
        }
    }

    /// Extents of an `H×W` tensor.
    pub fn hw(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::dim(
                "hw",
                format!("expected rank-2 H×W, got {:?}", self.shape),
            )),
        }
    }
}

impl<T: Clone> Tensor<T> {
    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    /// Builds a tensor from `f64` literals (handy in tests and constants).
    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::from_vec(shape, values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len()).unwrap()
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k, n) = kernels::matmul_dims(self.shape(), other.shape())?;
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &self.data, false, &other.data, false, &mut out, false);
        Tensor::from_vec([m, n], out)
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.hw().map_err(|_| {
            Error::dim("transpose2", format!("expected rank 2, got {:?}", self.shape))
        })?;
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Tensor::from_vec([c, r], out)
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let (outer, n, inner) = kernels::axis_split(&self.shape, axis, "softmax")?;
        let mut out = self.data.clone();
        kernels::softmax_in_place(&mut out, outer, n, inner);
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Cross-correlation of a `C_in×H×W` input with a `C_out×C_in×k×k` kernel.
    pub fn conv2d(&self, kernel: &Self, stride: usize, padding: usize) -> Result<Self> {
        let geo = kernels::ConvGeometry::new(self.shape(), kernel.shape(), stride, padding)?;
        let out = kernels::conv2d_forward(&geo, &self.data, &kernel.data);
        Tensor::from_vec([geo.c_out, geo.out_h, geo.out_w], out)
    }

    /// Bilinear resize of a `C×H×W` tensor using half-pixel centres.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let (c, h, w) = self.chw()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::dim(
                "resize_bilinear",
                format!("target extent {out_h}×{out_w} must be positive"),
            ));
        }
        if h == 0 || w == 0 {
            return Err(Error::dim("resize_bilinear", "empty source image"));
        }
        if (h, w) == (out_h, out_w) {
            return Ok(self.clone());
        }
        let plan = kernels::ResizePlan::new(h, w, out_h, out_w);
        Tensor::from_vec([c, out_h, out_w], plan.forward(&self.data, c))
    }

    /// Index of the maximum along axis 0 for every trailing position;
    /// ties resolve to the lowest index.
    pub fn argmax_axis0(&self) -> Result<Vec<usize>> {
        if self.rank() == 0 || self.shape[0] == 0 {
            return Err(Error::dim("argmax_axis0", "need a non-empty leading axis"));
        }
        let c = self.shape[0];
        let plane = self.data.len() / c;
        let mut best = vec![0usize; plane];
        let mut best_val: Vec<T> = self.data[..plane].to_vec();
        for k in 1..c {
            let row = &self.data[k * plane..(k + 1) * plane];
            for i in 0..plane {
                if row[i] > best_val[i] {
                    best_val[i] = row[i];
                    best[i] = k;
                }
            }
        }
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec([2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::<f64>::from_f64([2, 2], &[1.5, -2.0, 0.25, 7.0]).unwrap();
        let eye = Tensor::<f64>::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(eye.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::<f32>::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f32>::from_f64([2, 1], &[0.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros([2, 3]);
        let b = Tensor::<f32>::zeros([2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let t = Tensor::<f64>::from_f64([2], &[0.0, 0.0]).unwrap();
        assert_eq!(t.softmax(0).unwrap().data(), &[0.5, 0.5]);
        let t = Tensor::<f64>::from_f64([2], &[1.0, 0.0]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!((s.data()[0] - 0.7310586).abs() < 1e-7);
        assert!((s.data()[1] - 0.2689414).abs() < 1e-7);
        let t = Tensor::<f32>::from_f64([2], &[1000.0, 0.0]).unwrap();
        let s = t.softmax(0).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-30);
        assert!(t.softmax(1).is_err());
    }

    #[test]
    fn softmax_middle_axis() {
        let t = Tensor::<f64>::from_fn([2, 3, 2], |i| (i as f64 * 0.7).sin() * 5.0);
        let s = t.softmax(1).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let sum: f64 = (0..3).map(|k| s.data()[o * 6 + k * 2 + i]).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_identity_and_plateau() {
        let img = Tensor::<f32>::from_fn([1, 5, 5], |i| i as f32);
        let id = Tensor::<f32>::ones([1, 1, 1, 1]);
        assert_eq!(img.conv2d(&id, 1, 0).unwrap(), img);

        let mut hot = Tensor::<f32>::zeros([1, 5, 5]);
        hot.data_mut()[12] = 1.0;
        let ones = Tensor::<f32>::ones([1, 1, 3, 3]);
        let out = hot.conv2d(&ones, 1, 1).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let expect = if (1..=3).contains(&y) && (1..=3).contains(&x) { 1.0 } else { 0.0 };
                assert_eq!(out.data()[y * 5 + x], expect, "at {y},{x}");
            }
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let img = Tensor::<f32>::zeros([2, 4, 4]);
        let k = Tensor::<f32>::zeros([1, 3, 3, 3]);
        assert!(matches!(img.conv2d(&k, 1, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn resize_cases() {
        let t = Tensor::<f32>::from_fn([2, 3, 5], |i| (i as f32).sqrt());
        assert_eq!(t.resize_bilinear(3, 5).unwrap(), t);

        let c = Tensor::<f32>::full([1, 4, 4], 0.3);
        let r = c.resize_bilinear(7, 3).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-7));

        let t = Tensor::<f64>::from_f64([1, 2, 2], &[0.0, 1.0, 0.0, 1.0]).unwrap();
        let r = t.resize_bilinear(2, 4).unwrap();
        assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);

        assert!(t.resize_bilinear(0, 4).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::<f32>::from_f64([3, 2], &[0.2, 0.5, 0.5, 0.5, 0.3, 0.0]).unwrap();
        assert_eq!(t.argmax_axis0().unwrap(), vec![1, 0]);
    }
}
