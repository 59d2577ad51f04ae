//! Reverse-mode differentiation over a linear operation record.
//!
//! Nodes are appended in evaluation order, so walking the record backwards
//! is a valid topological order and visits every node exactly once. Leaf
//! gradients accumulate across [`Tape::backward`] calls until
//! [`Tape::zero_grad`].

use super::kernels::{self, ConvGeometry, ResizePlan};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the masked Dice term reduces over channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DiceReduction {
    /// One fraction over all pixels and channels.
    #[default]
    Joint,
    /// Fraction per channel, averaged over channels.
    PerClass,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geo: ConvGeometry,
        cols: Option<Vec<T>>,
    },
    ChannelBias(Var, Var),
    LeakyRelu(Var, T),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Resize {
        input: Var,
        plan: Box<ResizePlan>,
        channels: usize,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Softmax {
        input: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Normalize {
        input: Var,
        outer: usize,
        n: usize,
        inner: usize,
        norms: Vec<T>,
    },
    Sum(Var),
    MaskedCe {
        probs: Var,
        target: Tensor<T>,
        mask: Tensor<T>,
    },
    MaskedDice {
        probs: Var,
        target: Tensor<T>,
        mask: Tensor<T>,
        reduction: DiceReduction,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Probability floor applied before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-7;
/// Additive smoothing in the Dice fraction.
pub const DICE_EPS: f64 = 1e-5;

/// Recording of a differentiable computation.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers an untracked leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a tracked leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// `Σ wᵢ·xᵢ` over same-shaped operands.
    pub fn linear_combination(&mut self, terms: &[(T, Var)]) -> Result<Var> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Contract("empty linear combination".into()))?;
        let mut acc = self.scale(first.1, first.0);
        for &(w, v) in rest {
            let s = self.scale(v, w);
            acc = self.add(acc, s)?;
        }
        Ok(acc)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geo = ConvGeometry::new(
            self.value(input).shape(),
            self.value(kernel).shape(),
            stride,
            padding,
        )?;
        let keep = self.rg(kernel);
        let (out, cols) =
            kernels::conv2d_forward_cols(&geo, self.value(input).data(), self.value(kernel).data(), keep);
        let v = Tensor::from_vec([geo.c_out, geo.out_h, geo.out_w], out)?;
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(v, Op::Conv2d { input, kernel, geo, cols }, rg))
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 0).
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if xv.rank() == 0 || bv.shape() != [xv.shape()[0]] {
            return Err(Error::dim(
                "channel_bias",
                format!("bias {:?} does not match leading axis of {:?}", bv.shape(), xv.shape()),
            ));
        }
        let plane = xv.len() / xv.shape()[0];
        let mut out = xv.clone();
        for (chunk, &b) in out.data_mut().chunks_mut(plane.max(1)).zip(bv.data()) {
            for v in chunk {
                *v = *v + b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::ChannelBias(x, bias), rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let v = self.value(x).map(|a| if a > T::zero() { a } else { a * slope });
        let rg = self.rg(x);
        self.push(v, Op::LeakyRelu(x, slope), rg)
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (v, argmax) = kernels::maxpool2(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::MaxPool2 { input: x, argmax }, rg))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        let (c, h, w) = xv.chw()?;
        let v = xv.resize_bilinear(out_h, out_w)?;
        let plan = Box::new(ResizePlan::new(h, w, out_h, out_w));
        let rg = self.rg(x);
        Ok(self.push(
            v,
            Op::Resize {
                input: x,
                plan,
                channels: c,
            },
            rg,
        ))
    }

    /// Concatenation along axis 0; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() == 0 || pv.shape()[1..] != tail[..] {
                return Err(Error::dim(
                    "concat",
                    format!("part {:?} incompatible with trailing extents {tail:?}", pv.shape()),
                ));
            }
            lead += pv.shape()[0];
            data.extend_from_slice(pv.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let v = Tensor::from_vec(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::Concat(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, n, inner) = kernels::axis_split(xv.shape(), axis, "softmax")?;
        let v = xv.softmax(axis)?;
        let rg = self.rg(x);
        Ok(self.push(
            v,
            Op::Softmax {
                input: x,
                outer,
                n,
                inner,
            },
            rg,
        ))
    }

    /// Scales every slice along `axis` to unit Euclidean norm; all-zero
    /// slices map to zero.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, n, inner) = kernels::axis_split(xv.shape(), axis, "l2_normalize")?;
        let src = xv.data();
        let mut out = src.to_vec();
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * n * inner;
            for i in 0..inner {
                let mut ss = T::zero();
                for k in 0..n {
                    let a = src[base + k * inner + i];
                    ss = ss + a * a;
                }
                let norm = ss.sqrt();
                norms.push(norm);
                for k in 0..n {
                    let j = base + k * inner + i;
                    out[j] = if norm > T::zero() { src[j] / norm } else { T::zero() };
                }
            }
        }
        let v = Tensor::from_vec(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(
            v,
            Op::Normalize {
                input: x,
                outer,
                n,
                inner,
                norms,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    /// `−(1/HW) Σᵢ mᵢ Σ_c y_ic log max(p_ic, 1e-7)` for `C×H×W` probabilities,
    /// one-hot `target` (`C×H×W`) and binary `mask` (`H×W`).
    pub fn masked_ce(&mut self, probs: Var, target: &Tensor<T>, mask: &Tensor<T>) -> Result<Var> {
        let p = self.value(probs);
        let (c, h, w) = check_seg_operands("masked_ce", p, target, mask)?;
        let plane = h * w;
        let floor = T::lit(PROB_FLOOR);
        let mut acc = T::zero();
        for k in 0..c {
            for i in 0..plane {
                let j = k * plane + i;
                let m = mask.data()[i];
                let y = target.data()[j];
                if m != T::zero() && y != T::zero() {
                    acc = acc + m * y * p.data()[j].max(floor).ln();
                }
            }
        }
        let v = Tensor::scalar(-acc / T::from_usize(plane).unwrap());
        let rg = self.rg(probs);
        Ok(self.push(
            v,
            Op::MaskedCe {
                probs,
                target: target.clone(),
                mask: mask.clone(),
            },
            rg,
        ))
    }

    /// Smoothed masked Dice loss `1 − (2Σmpy + ε)/(Σm(p²+y²) + ε)`.
    pub fn masked_dice(
        &mut self,
        probs: Var,
        target: &Tensor<T>,
        mask: &Tensor<T>,
        reduction: DiceReduction,
    ) -> Result<Var> {
        let p = self.value(probs);
        let (c, h, w) = check_seg_operands("masked_dice", p, target, mask)?;
        let terms = dice_terms(p.data(), target.data(), mask.data(), c, h * w, reduction);
        let eps = T::lit(DICE_EPS);
        let loss = match reduction {
            DiceReduction::Joint => {
                let (num, den) = terms[0];
                T::one() - (num + eps) / (den + eps)
            }
            DiceReduction::PerClass => {
                let s: T = terms
                    .iter()
                    .map(|&(num, den)| T::one() - (num + eps) / (den + eps))
                    .sum();
                s / T::from_usize(c).unwrap()
            }
        };
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedDice {
                probs,
                target: target.clone(),
                mask: mask.clone(),
                reduction,
            },
            rg,
        ))
    }

    /// Back-propagates from scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        let mut pending: Vec<Option<Tensor<T>>> = Vec::new();
        pending.resize_with(loss.0 + 1, || None);
        pending[loss.0] = Some(Tensor::ones(self.value(loss).shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut send = |v: Var, t: Tensor<T>| {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut pending[v.0], t);
                }
            };
            match &node.op {
                Op::Leaf => accumulate(&mut self.grads[i], g),
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    send(*a, g.mul(bv)?);
                    send(*b, g.mul(av)?);
                }
                Op::Scale(a, s) => send(*a, g.scale(*s)),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = kernels::matmul_dims(av.shape(), bv.shape())?;
                    if self.nodes[a.0].requires_grad {
                        let mut da = vec![T::zero(); m * k];
                        T::gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, false);
                        send(*a, Tensor::from_vec([m, k], da)?);
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut db = vec![T::zero(); k * n];
                        T::gemm(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                        send(*b, Tensor::from_vec([k, n], db)?);
                    }
                }
                Op::Conv2d { input, kernel, geo, cols } => {
                    let (iv, kv) = (&self.nodes[input.0], &self.nodes[kernel.0]);
                    let (di, dk) = kernels::conv2d_backward(
                        geo,
                        iv.value.data(),
                        kv.value.data(),
                        g.data(),
                        cols.as_deref(),
                        iv.requires_grad,
                        kv.requires_grad,
                    );
                    if let Some(di) = di {
                        send(*input, Tensor::from_vec(iv.value.shape().to_vec(), di)?);
                    }
                    if let Some(dk) = dk {
                        send(*kernel, Tensor::from_vec(kv.value.shape().to_vec(), dk)?);
                    }
                }
                Op::ChannelBias(x, b) => {
                    let c = g.shape()[0];
                    let plane = g.len() / c.max(1);
                    let db: Vec<T> = g
                        .data()
                        .chunks(plane.max(1))
                        .map(|ch| ch.iter().copied().sum())
                        .collect();
                    send(*b, Tensor::from_vec([c], db)?);
                    send(*x, g);
                }
                Op::LeakyRelu(x, slope) => {
                    let xv = &self.nodes[x.0].value;
                    let d = g.zip_with(xv, "leaky_relu", |gv, a| {
                        if a > T::zero() {
                            gv
                        } else {
                            gv * *slope
                        }
                    })?;
                    send(*x, d);
                }
                Op::MaxPool2 { input, argmax } => {
                    let shape = self.nodes[input.0].value.shape().to_vec();
                    let mut d = Tensor::zeros(shape);
                    for (&j, &gv) in argmax.iter().zip(g.data()) {
                        d.data_mut()[j] = d.data()[j] + gv;
                    }
                    send(*input, d);
                }
                Op::Resize {
                    input,
                    plan,
                    channels,
                } => {
                    let shape = self.nodes[input.0].value.shape().to_vec();
                    let d = if shape[1..] == g.shape()[1..] {
                        g
                    } else {
                        Tensor::from_vec(shape, plan.backward(g.data(), *channels))?
                    };
                    send(*input, d);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pv = &self.nodes[p.0].value;
                        let n = pv.len();
                        let piece = g.data()[off..off + n].to_vec();
                        off += n;
                        send(*p, Tensor::from_vec(pv.shape().to_vec(), piece)?);
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    send(*x, g.reshape(shape)?);
                }
                Op::Softmax {
                    input,
                    outer,
                    n,
                    inner,
                } => {
                    let y = node.value.data();
                    let gd = g.data();
                    let mut d = vec![T::zero(); y.len()];
                    for o in 0..*outer {
                        let base = o * n * inner;
                        for i in 0..*inner {
                            let mut dot = T::zero();
                            for k in 0..*n {
                                let j = base + k * inner + i;
                                dot = dot + gd[j] * y[j];
                            }
                            for k in 0..*n {
                                let j = base + k * inner + i;
                                d[j] = y[j] * (gd[j] - dot);
                            }
                        }
                    }
                    send(*input, Tensor::from_vec(node.value.shape().to_vec(), d)?);
                }
                Op::Normalize {
                    input,
                    outer,
                    n,
                    inner,
                    norms,
                } => {
                    let y = node.value.data();
                    let gd = g.data();
                    let mut d = vec![T::zero(); y.len()];
                    for o in 0..*outer {
                        let base = o * n * inner;
                        for i in 0..*inner {
                            let norm = norms[o * inner + i];
                            if norm <= T::zero() {
                                continue;
                            }
                            let mut dot = T::zero();
                            for k in 0..*n {
                                let j = base + k * inner + i;
                                dot = dot + gd[j] * y[j];
                            }
                            for k in 0..*n {
                                let j = base + k * inner + i;
                                d[j] = (gd[j] - y[j] * dot) / norm;
                            }
                        }
                    }
                    send(*input, Tensor::from_vec(node.value.shape().to_vec(), d)?);
                }
                Op::Sum(x) => {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    send(*x, Tensor::full(shape, g.item()));
                }
                Op::MaskedCe {
                    probs,
                    target,
                    mask,
                } => {
                    let p = &self.nodes[probs.0].value;
                    let (c, h, w) = p.chw()?;
                    let plane = h * w;
                    let floor = T::lit(PROB_FLOOR);
                    let scale = -g.item() / T::from_usize(plane).unwrap();
                    let mut d = vec![T::zero(); p.len()];
                    for k in 0..c {
                        for i in 0..plane {
                            let j = k * plane + i;
                            let pv = p.data()[j];
                            let my = mask.data()[i] * target.data()[j];
                            if my != T::zero() && pv > floor {
                                d[j] = scale * my / pv;
                            }
                        }
                    }
                    send(*probs, Tensor::from_vec(p.shape().to_vec(), d)?);
                }
                Op::MaskedDice {
                    probs,
                    target,
                    mask,
                    reduction,
                } => {
                    let p = &self.nodes[probs.0].value;
                    let (c, h, w) = p.chw()?;
                    let plane = h * w;
                    let terms = dice_terms(p.data(), target.data(), mask.data(), c, plane, *reduction);
                    let eps = T::lit(DICE_EPS);
                    let two = T::lit(2.0);
                    let gv = g.item();
                    let per_class_scale = match reduction {
                        DiceReduction::Joint => T::one(),
                        DiceReduction::PerClass => T::one() / T::from_usize(c).unwrap(),
                    };
                    let mut d = vec![T::zero(); p.len()];
                    for k in 0..c {
                        let (num, den) = match reduction {
                            DiceReduction::Joint => terms[0],
                            DiceReduction::PerClass => terms[k],
                        };
                        let (num, den) = (num + eps, den + eps);
                        for i in 0..plane {
                            let j = k * plane + i;
                            let m = mask.data()[i];
                            if m == T::zero() {
                                continue;
                            }
                            // d/dp [1 − N/D] = −(2my·D − N·2mp)/D²
                            let y = target.data()[j];
                            let pv = p.data()[j];
                            d[j] = -gv * per_class_scale * two * m * (y * den - num * pv) / (den * den);
                        }
                    }
                    send(*probs, Tensor::from_vec(p.shape().to_vec(), d)?);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(g),
    }
}

fn check_seg_operands<T: Scalar>(
    op: &'static str,
    p: &Tensor<T>,
    target: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (c, h, w) = p.chw()?;
    if target.shape() != p.shape() || mask.shape() != [h, w] {
        return Err(Error::dim(
            op,
            format!(
                "probs {:?}, target {:?}, mask {:?} misaligned",
                p.shape(),
                target.shape(),
                mask.shape()
            ),
        ));
    }
    Ok((c, h, w))
}

/// Unsmoothed `(2Σmpy, Σm(p²+y²))`, one entry for joint reduction or one per
/// channel.
fn dice_terms<T: Scalar>(
    p: &[T],
    y: &[T],
    m: &[T],
    c: usize,
    plane: usize,
    reduction: DiceReduction,
) -> Vec<(T, T)> {
    let two = T::lit(2.0);
    let mut per = Vec::with_capacity(c);
    for k in 0..c {
        let (mut num, mut den) = (T::zero(), T::zero());
        for i in 0..plane {
            let j = k * plane + i;
            let mi = m[i];
            if mi == T::zero() {
                continue;
            }
            num = num + two * mi * p[j] * y[j];
            den = den + mi * (p[j] * p[j] + y[j] * y[j]);
        }
        per.push((num, den));
    }
    match reduction {
        DiceReduction::PerClass => per,
        DiceReduction::Joint => {
            let num = per.iter().map(|t| t.0).sum();
            let den = per.iter().map(|t| t.1).sum();
            vec![(num, den)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_and_square_grads() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::from_f64([3], &[1.0, -2.0, 0.5]).unwrap());
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);

        tape.zero_grad();
        let sq = tape.mul(w, w).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::from_f64([2], &[3.0, 4.0]).unwrap());
        let l = tape.sum(w);
        tape.backward(l).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::zeros([2]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let c = tape.constant(Tensor::from_f64([2], &[5.0, 6.0]).unwrap());
        let p = tape.mul(w, c).unwrap();
        let l = tape.sum(p);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[5.0, 6.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn masked_losses_hand_cases() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_f64([2, 1, 1], &[0.5, 0.5]).unwrap());
        let y = Tensor::from_f64([2, 1, 1], &[0.0, 1.0]).unwrap();
        let m = Tensor::from_f64([1, 1], &[1.0]).unwrap();
        let ce = tape.masked_ce(p, &y, &m).unwrap();
        assert!((tape.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let dice = tape.masked_dice(p, &y, &m, DiceReduction::Joint).unwrap();
        let expect = 1.0 - (1.0 + DICE_EPS) / (1.5 + DICE_EPS);
        assert!((tape.value(dice).item() - expect).abs() < 1e-12);

        let zero = Tensor::from_f64([1, 1], &[0.0]).unwrap();
        let ce0 = tape.masked_ce(p, &y, &zero).unwrap();
        let d0 = tape.masked_dice(p, &y, &zero, DiceReduction::Joint).unwrap();
        assert_eq!(tape.value(ce0).item(), 0.0);
        assert_eq!(tape.value(d0).item(), 0.0);
    }
}
