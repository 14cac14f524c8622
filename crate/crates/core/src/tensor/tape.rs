//! Define-by-run reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node holding its output
//! value and enough saved state to run its backward rule. [`Tape::backward`]
//! replays the nodes in reverse recording order. Gradients of a node used
//! several times are summed.

use std::cell::{Ref, RefCell};

use rand::Rng;
use rayon::prelude::*;

use super::element::{gemm, Real};
use super::kernels::{axis_lanes, bilinear_taps, softmax_lanes, BilinearTap, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`]. Only meaningful on the tape that
/// issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Conv2dParams {
    pub const UNIT: Conv2dParams = Conv2dParams {
        stride: 1,
        dilation: 1,
        padding: 0,
    };

    /// Stride-1 "same" padding for an odd kernel at the given dilation.
    pub fn same(k: usize, dilation: usize) -> Self {
        Conv2dParams {
            stride: 1,
            dilation,
            padding: dilation * (k - 1) / 2,
        }
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Relu(usize),
    BatchedMatMul {
        a: usize,
        b: usize,
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    Resize {
        x: usize,
        rows: Vec<BilinearTap>,
        cols: Vec<BilinearTap>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    CrossEntropy {
        logits: usize,
        probs: Vec<T>,
        labels: Vec<i32>,
        count: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Mean(a) | Op::Reshape(a) | Op::Relu(a) => vec![a],
            Op::BatchedMatMul { a, b, .. } => vec![a, b],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::MaxPool { x, .. } | Op::Softmax { x, .. } | Op::Resize { x, .. } | Op::Dropout { x, .. } => {
                vec![x]
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Concat { ref inputs, .. } => inputs.clone(),
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Owned by a single thread; values are plain
/// [`Tensor`]s and can be copied out with [`Tape::value`].
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, grad: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(grad),
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    /// A tape that records backward rules.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that evaluates eagerly without retaining backward state.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.recording && op.inputs().iter().any(|&i| nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Records an input. Gradients are only produced for leaves with
    /// `requires_grad` and the values that depend on them.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.recording,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn unary(&self, x: Var, f: impl FnOnce(&Tensor<T>) -> Result<(Tensor<T>, Op<T>)>) -> Result<Var> {
        let (value, op) = {
            let nodes = self.nodes.borrow();
            f(&nodes[x.0].value)?
        };
        Ok(self.push(value, op))
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<(Tensor<T>, Op<T>)>,
    ) -> Result<Var> {
        let (value, op) = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)?
        };
        Ok(self.push(value, op))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| {
            same_shape("add", x, y)?;
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
            Ok((Tensor::new(x.shape(), data)?, Op::Add(a.0, b.0)))
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| {
            same_shape("mul", x, y)?;
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
            Ok((Tensor::new(x.shape(), data)?, Op::Mul(a.0, b.0)))
        })
    }

    pub fn scale(&self, x: Var, s: T) -> Result<Var> {
        self.unary(x, |t| Ok((t.map(|v| v * s), Op::Scale(x.0, s))))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        self.unary(x, |t| Ok((Tensor::scalar(t.sum()), Op::Sum(x.0))))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        self.unary(x, |t| {
            let n = T::lit(t.len() as f64);
            Ok((Tensor::scalar(t.sum() / n), Op::Mean(x.0)))
        })
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        self.unary(x, |t| {
            let out = t.clone().reshape(shape.to_vec()).map_err(|_| Error::shape("reshape", t.shape(), shape))?;
            Ok((out, Op::Reshape(x.0)))
        })
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(x, |t| Ok((t.map(|v| v.max(T::zero())), Op::Relu(x.0))))
    }

    /// Plain matrix product of `M×K` and `K×N`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| {
            let (&[m, k1], &[k2, n]) = (x.shape(), y.shape()) else {
                return Err(Error::shape("matmul", x.shape(), y.shape()));
            };
            if k1 != k2 {
                return Err(Error::shape("matmul", x.shape(), y.shape()));
            }
            let mut out = vec![T::zero(); m * n];
            gemm(false, false, m, n, k1, T::one(), x.data(), y.data(), T::zero(), &mut out);
            let op = Op::BatchedMatMul {
                a: a.0,
                b: b.0,
                trans_a: false,
                trans_b: false,
                m,
                n,
                k: k1,
            };
            Ok((Tensor::new(vec![m, n], out)?, op))
        })
    }

    /// Batched product `op(a[i]) · op(b[i])` over a shared leading axis, where
    /// `op` optionally transposes the trailing two axes.
    pub fn batched_matmul(&self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        self.binary(a, b, |x, y| {
            let (&[ba, ar, ac], &[bb, br, bc]) = (x.shape(), y.shape()) else {
                return Err(Error::shape("batched_matmul", x.shape(), y.shape()));
            };
            let (m, k1) = if trans_a { (ac, ar) } else { (ar, ac) };
            let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
            if ba != bb || k1 != k2 {
                return Err(Error::shape("batched_matmul", x.shape(), y.shape()));
            }
            let mut out = vec![T::zero(); ba * m * n];
            for (i, o) in out.chunks_mut(m * n).enumerate() {
                let xa = &x.data()[i * m * k1..(i + 1) * m * k1];
                let yb = &y.data()[i * k1 * n..(i + 1) * k1 * n];
                gemm(trans_a, trans_b, m, n, k1, T::one(), xa, yb, T::zero(), o);
            }
            let op = Op::BatchedMatMul {
                a: a.0,
                b: b.0,
                trans_a,
                trans_b,
                m,
                n,
                k: k1,
            };
            Ok((Tensor::new(vec![ba, m, n], out)?, op))
        })
    }

    /// Cross-correlation of `x: [B, Cin, H, W]` with `w: [Cout, Cin, k, k]`.
    pub fn conv2d(&self, x: Var, w: Var, bias: Option<Var>, params: Conv2dParams) -> Result<Var> {
        let (value, op) = {
            let nodes = self.nodes.borrow();
            let xt = &nodes[x.0].value;
            let wt = &nodes[w.0].value;
            let geom = ConvGeometry::new(xt.shape(), wt.shape(), params.stride, params.dilation, params.padding)?;
            let bt = match bias {
                Some(b) => {
                    let bt = &nodes[b.0].value;
                    if bt.shape() != [geom.cout] {
                        return Err(Error::shape("conv2d bias", bt.shape(), &[geom.cout]));
                    }
                    Some(bt.data())
                }
                None => None,
            };
            let batch = xt.shape()[0];
            let out = conv_forward(&geom, xt.data(), wt.data(), bt, batch);
            let value = Tensor::new(vec![batch, geom.cout, geom.oh, geom.ow], out)?;
            (
                value,
                Op::Conv2d {
                    x: x.0,
                    w: w.0,
                    b: bias.map(|b| b.0),
                    geom,
                },
            )
        };
        Ok(self.push(value, op))
    }

    /// Max pooling without padding over `k×k` windows.
    pub fn max_pool(&self, x: Var, k: usize, stride: usize) -> Result<Var> {
        self.unary(x, |t| {
            let [b, c, h, w] = t.dims4()?;
            if k == 0 || stride == 0 || k > h || k > w {
                return Err(Error::config(format!("max_pool k={k} stride={stride} on {h}x{w}")));
            }
            let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
            let mut out = Vec::with_capacity(b * c * oh * ow);
            let mut argmax = Vec::with_capacity(b * c * oh * ow);
            let src = t.data();
            for plane in 0..b * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = base + oy * stride * w + ox * stride;
                        for dy in 0..k {
                            for dx in 0..k {
                                let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                                if src[idx] > src[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(src[best]);
                        argmax.push(best);
                    }
                }
            }
            Ok((Tensor::new(vec![b, c, oh, ow], out)?, Op::MaxPool { x: x.0, argmax }))
        })
    }

    /// Per-channel normalisation over batch and spatial axes using the batch
    /// statistics. Returns the output together with the batch mean and the
    /// unbiased batch variance for running-statistics updates.
    pub fn batch_norm_train(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (value, op, mean, var_unbiased) = {
            let nodes = self.nodes.borrow();
            let (xt, gt, bt) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            let [b, c, h, w] = xt.dims4()?;
            check_affine(c, gt, bt)?;
            let count = b * h * w;
            if count < 2 {
                return Err(Error::Degenerate(format!(
                    "batch_norm in training mode needs more than one value per channel, got batch {b} with {h}x{w} extent"
                )));
            }
            let plane = h * w;
            let n = T::lit(count as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let s = &xt.data()[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                    mean[ci] += s.iter().copied().sum::<T>();
                }
            }
            for m in &mut mean {
                *m /= n;
            }
            for bi in 0..b {
                for ci in 0..c {
                    let s = &xt.data()[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                    var[ci] += s.iter().map(|&v| (v - mean[ci]) * (v - mean[ci])).sum::<T>();
                }
            }
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v / n + eps).sqrt()).collect();
            let var_unbiased = var.iter().map(|&v| v / T::lit((count - 1) as f64)).collect();
            let (out, xhat) = normalize(xt.data(), b, c, plane, &mean, &inv_std, gt.data(), bt.data());
            let op = Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch_stats: true,
            };
            (Tensor::new(xt.shape(), out)?, op, mean, var_unbiased)
        };
        Ok((self.push(value, op), mean, var_unbiased))
    }

    /// Per-channel normalisation with fixed statistics.
    pub fn batch_norm_eval(&self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let (value, op) = {
            let nodes = self.nodes.borrow();
            let (xt, gt, bt) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            let [b, c, h, w] = xt.dims4()?;
            check_affine(c, gt, bt)?;
            if mean.len() != c || var.len() != c {
                return Err(Error::shape("batch_norm running stats", &[c], &[mean.len(), var.len()]));
            }
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let (out, xhat) = normalize(xt.data(), b, c, h * w, mean, &inv_std, gt.data(), bt.data());
            let op = Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch_stats: false,
            };
            (Tensor::new(xt.shape(), out)?, op)
        };
        Ok(self.push(value, op))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        self.unary(x, |t| {
            if axis >= t.rank() {
                return Err(Error::config(format!("softmax axis {axis} out of range for {:?}", t.shape())));
            }
            let (outer, len, inner) = axis_lanes(t.shape(), axis);
            let mut out = vec![T::zero(); t.len()];
            softmax_lanes(t.data(), &mut out, outer, len, inner);
            Ok((Tensor::new(t.shape(), out)?, Op::Softmax { x: x.0, axis }))
        })
    }

    /// Bilinear resize of the two trailing axes of a 4-d tensor
    /// (align-corners = false).
    pub fn resize_bilinear(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.unary(x, |t| {
            let [b, c, h, w] = t.dims4()?;
            if out_h == 0 || out_w == 0 {
                return Err(Error::config("resize to an empty extent"));
            }
            let rows = bilinear_taps(h, out_h);
            let cols = bilinear_taps(w, out_w);
            let mut out = vec![T::zero(); b * c * out_h * out_w];
            for (plane, dst) in out.chunks_mut(out_h * out_w).enumerate() {
                let src = &t.data()[plane * h * w..(plane + 1) * h * w];
                for (oy, r) in rows.iter().enumerate() {
                    let fy = T::lit(r.frac);
                    for (ox, cl) in cols.iter().enumerate() {
                        let fx = T::lit(cl.frac);
                        let top = src[r.lo * w + cl.lo] * (T::one() - fx) + src[r.lo * w + cl.hi] * fx;
                        let bottom = src[r.hi * w + cl.lo] * (T::one() - fx) + src[r.hi * w + cl.hi] * fx;
                        dst[oy * out_w + ox] = top * (T::one() - fy) + bottom * fy;
                    }
                }
            }
            Ok((Tensor::new(vec![b, c, out_h, out_w], out)?, Op::Resize { x: x.0, rows, cols }))
        })
    }

    /// Bilinear upsampling of both spatial axes by an integer factor.
    pub fn upsample_bilinear(&self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::config("upsampling factor must be at least 1"));
        }
        if factor == 1 {
            return Ok(x);
        }
        let shape = self.shape(x);
        let [_, _, h, w] = shape[..] else {
            return Err(Error::shape("upsample", &shape, &[0, 0, 0, 0]));
        };
        self.resize_bilinear(x, h * factor, w * factor)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = xs
                .first()
                .map(|v| &nodes[v.0].value)
                .ok_or_else(|| Error::config("concat of zero tensors"))?;
            if axis >= first.rank() {
                return Err(Error::config(format!("concat axis {axis} out of range")));
            }
            let mut shape = first.shape().to_vec();
            shape[axis] = 0;
            for v in xs {
                let t = &nodes[v.0].value;
                let compatible = t.rank() == first.rank()
                    && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::shape("concat", first.shape(), t.shape()));
                }
                shape[axis] += t.shape()[axis];
            }
            let (outer, _, inner) = axis_lanes(&shape, axis);
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for v in xs {
                    let t = &nodes[v.0].value;
                    let chunk = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(shape, out)?
        };
        Ok(self.push(
            value,
            Op::Concat {
                inputs: xs.iter().map(|v| v.0).collect(),
                axis,
            },
        ))
    }

    /// Mean negative log-likelihood of `labels: [B, H, W]` under the softmax
    /// of `logits: [B, L, H, W]`, skipping pixels equal to `ignore_index`.
    pub fn cross_entropy(&self, logits: Var, labels: &Tensor<i32>, ignore_index: i32) -> Result<Var> {
        self.unary(logits, |t| {
            let [b, l, h, w] = t.dims4()?;
            if labels.shape() != [b, h, w] {
                return Err(Error::shape("cross_entropy labels", t.shape(), labels.shape()));
            }
            let plane = h * w;
            let mut probs = vec![T::zero(); t.len()];
            softmax_lanes(t.data(), &mut probs, b, l, plane);
            let mut total = 0.0f64;
            let mut count = 0usize;
            for (p, &label) in labels.data().iter().enumerate() {
                if label == ignore_index {
                    continue;
                }
                if label < 0 || label as usize >= l {
                    return Err(Error::Contract(format!(
                        "label {label} outside 0..{l} and not the ignore index {ignore_index}"
                    )));
                }
                let (bi, pix) = (p / plane, p % plane);
                let base = bi * l * plane + pix;
                // log-softmax from the logits keeps saturated predictions finite
                let lane = (0..l).map(|j| t.data()[base + j * plane].as_f64());
                let max = lane.clone().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + lane.map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - t.data()[base + label as usize * plane].as_f64();
                count += 1;
            }
            if count == 0 {
                return Err(Error::EmptyLoss);
            }
            let value = Tensor::scalar(T::lit(total / count as f64));
            let op = Op::CrossEntropy {
                logits: logits.0,
                probs,
                // ignored pixels are stored as -1 for the backward sweep
                labels: labels
                    .data()
                    .iter()
                    .map(|&v| if v == ignore_index { -1 } else { v })
                    .collect(),
                count,
            };
            Ok((value, op))
        })
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`. `p == 0` returns `x` unchanged.
    pub fn dropout(&self, x: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        self.unary(x, |t| {
            let mask: Vec<T> = (0..t.len())
                .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
                .collect();
            let out = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            Ok((Tensor::new(t.shape(), out)?, Op::Dropout { x: x.0, mask }))
        })
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::shape("backward needs a scalar loss", root.value.shape(), &[]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, grad) in backward_rule(&nodes, node, &g)? {
                if nodes[input].requires_grad {
                    accumulate(&mut grads[input], grad);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn check_affine<T: Real>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("batch_norm affine", gamma.shape(), &[c]));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn normalize<T: Real>(
    x: &[T],
    b: usize,
    c: usize,
    plane: usize,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let range = (bi * c + ci) * plane..(bi * c + ci + 1) * plane;
            for i in range {
                let n = (x[i] - mean[ci]) * inv_std[ci];
                xhat[i] = n;
                out[i] = gamma[ci] * n + beta[ci];
            }
        }
    }
    (out, xhat)
}

fn conv_forward<T: Real>(g: &ConvGeometry, x: &[T], w: &[T], bias: Option<&[T]>, batch: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * g.out_item()];
    let pixels = g.out_pixels();
    out.par_chunks_mut(g.out_item())
        .zip(x.par_chunks(g.in_item()))
        .for_each_init(Vec::new, |cols, (o, xi)| {
            let cols: &[T] = if g.is_pointwise() {
                xi
            } else {
                cols.resize(g.col_rows() * pixels, T::zero());
                g.im2col(xi, cols);
                cols
            };
            gemm(false, false, g.cout, pixels, g.col_rows(), T::one(), w, cols, T::zero(), o);
            if let Some(b) = bias {
                for (row, &bv) in o.chunks_mut(pixels).zip(b) {
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    out
}

struct ConvGrads<T> {
    dx: Option<Tensor<T>>,
    dw: Vec<T>,
    db: Vec<T>,
}

fn conv_backward<T: Real>(
    g: &ConvGeometry,
    x: &Tensor<T>,
    w: &[T],
    gout: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let batch = x.shape()[0];
    let pixels = g.out_pixels();
    let krows = g.col_rows();
    let per_item: Vec<(Option<Vec<T>>, Vec<T>, Vec<T>)> = (0..batch)
        .into_par_iter()
        .map(|i| {
            let xi = &x.data()[i * g.in_item()..(i + 1) * g.in_item()];
            let gi = &gout[i * g.out_item()..(i + 1) * g.out_item()];
            let owned;
            let cols: &[T] = if g.is_pointwise() {
                xi
            } else {
                let mut c = vec![T::zero(); krows * pixels];
                g.im2col(xi, &mut c);
                owned = c;
                &owned
            };
            let mut dw = vec![T::zero(); g.cout * krows];
            gemm(false, true, g.cout, krows, pixels, T::one(), gi, cols, T::zero(), &mut dw);
            let db = gi.chunks(pixels).map(|row| row.iter().copied().sum()).collect();
            let dx = need_dx.then(|| {
                let mut dcols = vec![T::zero(); krows * pixels];
                gemm(true, false, krows, pixels, g.cout, T::one(), w, gi, T::zero(), &mut dcols);
                if g.is_pointwise() {
                    dcols
                } else {
                    let mut dx = vec![T::zero(); g.in_item()];
                    g.col2im(&dcols, &mut dx);
                    dx
                }
            });
            (dx, dw, db)
        })
        .collect();
    let mut dw = vec![T::zero(); g.cout * krows];
    let mut db = vec![T::zero(); g.cout];
    let mut dx = need_dx.then(|| Vec::with_capacity(x.len()));
    for (dxi, dwi, dbi) in per_item {
        dw.iter_mut().zip(&dwi).for_each(|(a, &b)| *a += b);
        db.iter_mut().zip(&dbi).for_each(|(a, &b)| *a += b);
        if let (Some(all), Some(part)) = (dx.as_mut(), dxi) {
            all.extend_from_slice(&part);
        }
    }
    ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape(), d).expect("conv dx shape")),
        dw,
        db,
    }
}

fn backward_rule<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
    let value = |i: usize| &nodes[i].value;
    let like = |i: usize, data: Vec<T>| Tensor::new(nodes[i].value.shape(), data);
    let out = match node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
        Op::Mul(a, b) => {
            let ga = g.data().iter().zip(value(b).data()).map(|(&p, &q)| p * q).collect();
            let gb = g.data().iter().zip(value(a).data()).map(|(&p, &q)| p * q).collect();
            vec![(a, like(a, ga)?), (b, like(b, gb)?)]
        }
        Op::Scale(a, s) => vec![(a, g.map(|v| v * s))],
        Op::Sum(a) => vec![(a, Tensor::full(value(a).shape(), g.data()[0]))],
        Op::Mean(a) => {
            let n = T::lit(value(a).len() as f64);
            vec![(a, Tensor::full(value(a).shape(), g.data()[0] / n))]
        }
        Op::Reshape(a) => vec![(a, like(a, g.data().to_vec())?)],
        Op::Relu(a) => {
            let d = g
                .data()
                .iter()
                .zip(node.value.data())
                .map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() })
                .collect();
            vec![(a, like(a, d)?)]
        }
        Op::BatchedMatMul {
            a,
            b,
            trans_a,
            trans_b,
            m,
            n,
            k,
        } => {
            let (av, bv) = (value(a).data(), value(b).data());
            let batch = g.len() / (m * n);
            let mut ga = vec![T::zero(); av.len()];
            let mut gb = vec![T::zero(); bv.len()];
            for i in 0..batch {
                let gi = &g.data()[i * m * n..(i + 1) * m * n];
                let ai = &av[i * m * k..(i + 1) * m * k];
                let bi = &bv[i * k * n..(i + 1) * k * n];
                let gai = &mut ga[i * m * k..(i + 1) * m * k];
                if trans_a {
                    gemm(trans_b, true, k, m, n, T::one(), bi, gi, T::zero(), gai);
                } else {
                    gemm(false, !trans_b, m, k, n, T::one(), gi, bi, T::zero(), gai);
                }
                let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                if trans_b {
                    gemm(true, trans_a, n, k, m, T::one(), gi, ai, T::zero(), gbi);
                } else {
                    gemm(!trans_a, false, k, n, m, T::one(), ai, gi, T::zero(), gbi);
                }
            }
            vec![(a, like(a, ga)?), (b, like(b, gb)?)]
        }
        Op::Conv2d { x, w, b, geom } => {
            let grads = conv_backward(&geom, value(x), value(w).data(), g.data(), nodes[x].requires_grad);
            let mut out = vec![(w, like(w, grads.dw)?)];
            if let Some(dx) = grads.dx {
                out.push((x, dx));
            }
            if let Some(b) = b {
                out.push((b, like(b, grads.db)?));
            }
            out
        }
        Op::MaxPool { x, ref argmax } => {
            let mut d = vec![T::zero(); value(x).len()];
            for (&src, &gv) in argmax.iter().zip(g.data()) {
                d[src] += gv;
            }
            vec![(x, like(x, d)?)]
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            ref xhat,
            ref inv_std,
            batch_stats,
        } => {
            let [b, c, h, w] = value(x).dims4()?;
            let plane = h * w;
            let gm = value(gamma).data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    for i in (bi * c + ci) * plane..(bi * c + ci + 1) * plane {
                        dgamma[ci] += g.data()[i] * xhat[i];
                        dbeta[ci] += g.data()[i];
                    }
                }
            }
            let mut dx = vec![T::zero(); g.len()];
            let count = T::lit((b * plane) as f64);
            for bi in 0..b {
                for ci in 0..c {
                    let scale = gm[ci] * inv_std[ci];
                    for i in (bi * c + ci) * plane..(bi * c + ci + 1) * plane {
                        dx[i] = if batch_stats {
                            // d/dx of (x - mean)/std with both statistics taken from the batch
                            scale * (g.data()[i] - dbeta[ci] / count - xhat[i] * dgamma[ci] / count)
                        } else {
                            scale * g.data()[i]
                        };
                    }
                }
            }
            vec![(x, like(x, dx)?), (gamma, like(gamma, dgamma)?), (beta, like(beta, dbeta)?)]
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = axis_lanes(node.value.shape(), axis);
            let mut d = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: T = (0..len).map(|j| g.data()[base + j * inner] * y[base + j * inner]).sum();
                    for j in 0..len {
                        let p = base + j * inner;
                        d[p] = y[p] * (g.data()[p] - dot);
                    }
                }
            }
            vec![(x, like(x, d)?)]
        }
        Op::Resize { x, ref rows, ref cols } => {
            let [_, _, h, w] = value(x).dims4()?;
            let (oh, ow) = (rows.len(), cols.len());
            let mut d = vec![T::zero(); value(x).len()];
            for (plane, dst) in d.chunks_mut(h * w).enumerate() {
                let src = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                for (oy, r) in rows.iter().enumerate() {
                    let fy = T::lit(r.frac);
                    for (ox, cl) in cols.iter().enumerate() {
                        let fx = T::lit(cl.frac);
                        let gv = src[oy * ow + ox];
                        let (top, bottom) = (gv * (T::one() - fy), gv * fy);
                        dst[r.lo * w + cl.lo] += top * (T::one() - fx);
                        dst[r.lo * w + cl.hi] += top * fx;
                        dst[r.hi * w + cl.lo] += bottom * (T::one() - fx);
                        dst[r.hi * w + cl.hi] += bottom * fx;
                    }
                }
            }
            vec![(x, like(x, d)?)]
        }
        Op::Concat { ref inputs, axis } => {
            let (outer, _, inner) = axis_lanes(node.value.shape(), axis);
            let mut parts: Vec<Vec<T>> = inputs.iter().map(|&i| Vec::with_capacity(value(i).len())).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (part, &i) in parts.iter_mut().zip(inputs) {
                    let chunk = value(i).shape()[axis] * inner;
                    part.extend_from_slice(&g.data()[pos..pos + chunk]);
                    pos += chunk;
                }
            }
            inputs
                .iter()
                .zip(parts)
                .map(|(&i, p)| Ok((i, like(i, p)?)))
                .collect::<Result<Vec<_>>>()?
        }
        Op::CrossEntropy {
            logits,
            ref probs,
            ref labels,
            count,
        } => {
            let [_, l, h, w] = value(logits).dims4()?;
            let plane = h * w;
            let scale = g.data()[0] / T::lit(count as f64);
            let mut d = vec![T::zero(); probs.len()];
            for (p, &label) in labels.iter().enumerate() {
                if label < 0 {
                    continue;
                }
                let base = (p / plane) * l * plane + p % plane;
                for j in 0..l {
                    let idx = base + j * plane;
                    let target = if j == label as usize { T::one() } else { T::zero() };
                    d[idx] = (probs[idx] - target) * scale;
                }
            }
            vec![(logits, like(logits, d)?)]
        }
        Op::Dropout { x, ref mask } => {
            let d = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
            vec![(x, like(x, d)?)]
        }
    };
    Ok(out)
}
