//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar output walks the tape in reverse and
//! returns gradients for every node that (transitively) depends on a leaf
//! created with [`Graph::leaf`]. Constants never receive gradients, and no
//! gradient work is done for subgraphs that only touch constants.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulConst(Var, Rc<Tensor<T>>),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    MeanRows(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        spec: Conv2dSpec,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    },
    GlobalAvgPool(Var),
    GateShift {
        x: Var,
        gate: Var,
    },
    Resample {
        x: Var,
        start: usize,
        len: usize,
    },
    NormalizeRows {
        x: Var,
        eps: f64,
    },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => vec![*a, *b],
            MatMul { a, b, .. } => vec![*a, *b],
            Scale(a, _)
            | AddScalar(a)
            | MulConst(a, _)
            | Tanh(a)
            | Sigmoid(a)
            | Silu(a)
            | Exp(a)
            | Log(a)
            | Square(a)
            | Sum(a)
            | MeanRows(a)
            | SumCols(a)
            | SoftmaxRows(a)
            | LogSoftmaxRows(a)
            | Reshape(a)
            | Transpose(a)
            | GlobalAvgPool(a) => vec![*a],
            SliceRows { x, .. } | SliceCols { x, .. } | Resample { x, .. } => vec![*x],
            NormalizeRows { x, .. } => vec![*x],
            ConcatRows(v) | ConcatCols(v) => v.clone(),
            Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            GroupNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            GateShift { x, gate } => vec![*x, *gate],
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording tape.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape2(t: &Tensor<impl Scalar>) -> (usize, usize) {
    assert_eq!(t.ndim(), 2, "expected a 2-D tensor, got {:?}", t.shape());
    (t.shape()[0], t.shape()[1])
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn conv_out(size: usize, k: usize, spec: Conv2dSpec) -> usize {
    (size + 2 * spec.pad - k) / spec.stride + 1
}

/// Frames processed per im2col buffer; bounds scratch memory.
fn conv_chunk(ckk: usize, hw: usize, n: usize) -> usize {
    let budget = 1usize << 22;
    (budget / (ckk * hw).max(1)).clamp(1, n.max(1))
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    spec: Conv2dSpec,
    (ho, wo): (usize, usize),
    frames: std::ops::Range<usize>,
    cols: &mut [T],
) {
    let nb = frames.len();
    let row_len = nb * ho * wo;
    for (f, n) in frames.enumerate() {
        let xn = &x[n * c * h * w..(n + 1) * c * h * w];
        for ci in 0..c {
            for i in 0..kh {
                for j in 0..kw {
                    let row = (ci * kh + i) * kw + j;
                    let base = row * row_len + f * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * spec.stride + i) as isize - spec.pad as isize;
                        let dst = &mut cols[base + oy * wo..base + (oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &xn[ci * h * w + iy as usize * w..ci * h * w + (iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * spec.stride + j) as isize - spec.pad as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    spec: Conv2dSpec,
    (ho, wo): (usize, usize),
    frames: std::ops::Range<usize>,
    dx: &mut [T],
) {
    let nb = frames.len();
    let row_len = nb * ho * wo;
    for (f, n) in frames.enumerate() {
        let dxn = &mut dx[n * c * h * w..(n + 1) * c * h * w];
        for ci in 0..c {
            for i in 0..kh {
                for j in 0..kw {
                    let row = (ci * kh + i) * kw + j;
                    let base = row * row_len + f * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * spec.stride + i) as isize - spec.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &cols[base + oy * wo..base + (oy + 1) * wo];
                        let off = ci * h * w + iy as usize * w;
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * spec.stride + j) as isize - spec.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dxn[off + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
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
        let requires_grad = op.parents().iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// First element of `v`, as `f64`.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0].as_f64()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).map(f);
        self.push(out, op)
    }

    // ----- elementwise -------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = zip_map(&self.value(a), &self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = zip_map(&self.value(a), &self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = zip_map(&self.value(a), &self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        let (m, n) = shape2(&av);
        assert_eq!(rv.len(), n, "add_row width mismatch");
        let mut out = av.as_ref().clone();
        for i in 0..m {
            for (o, &r) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&self, a: Var, s: T) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    /// Elementwise product with a constant tensor (masks, weights).
    pub fn mul_const(&self, a: Var, c: Tensor<T>) -> Var {
        let out = zip_map(&self.value(a), &c, |x, y| x * y);
        self.push(out, Op::MulConst(a, Rc::new(c)))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    // ----- reductions --------------------------------------------------

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Column means of an `[m, n]` matrix, shape `[1, n]`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = shape2(&av);
        let inv = T::one() / T::from_usize(m).unwrap();
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(av.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Tensor::new([1, n], out).unwrap(), Op::MeanRows(a))
    }

    /// Row sums of an `[m, n]` matrix, shape `[m, 1]`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let av = self.value(a);
        let (m, _) = shape2(&av);
        let out: Vec<T> = (0..m).map(|i| av.row(i).iter().copied().sum()).collect();
        self.push(Tensor::new([m, 1], out).unwrap(), Op::SumCols(a))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = shape2(&av);
        let mut out = av.as_ref().clone();
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = shape2(&av);
        let mut out = av.as_ref().clone();
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    // ----- shape -------------------------------------------------------

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (m, n) = shape2(&av);
        assert!(start + len <= m, "slice_rows out of range");
        let out = Tensor::new([len, n], av.data()[start * n..(start + len) * n].to_vec()).unwrap();
        self.push(out, Op::SliceRows { x: a, start })
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (m, n) = shape2(&av);
        assert!(start + len <= n, "slice_cols out of range");
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&av.row(i)[start..start + len]);
        }
        self.push(Tensor::new([m, len], out).unwrap(), Op::SliceCols { x: a, start })
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let n = shape2(&vals[0]).1;
        let mut data = Vec::new();
        let mut m = 0;
        for v in &vals {
            let (r, c) = shape2(v);
            assert_eq!(c, n, "concat_rows width mismatch");
            m += r;
            data.extend_from_slice(v.data());
        }
        self.push(Tensor::new([m, n], data).unwrap(), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let m = shape2(&vals[0]).0;
        let widths: Vec<usize> = vals
            .iter()
            .map(|v| {
                let (r, c) = shape2(v);
                assert_eq!(r, m, "concat_cols height mismatch");
                c
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for v in &vals {
                data.extend_from_slice(v.row(i));
            }
        }
        self.push(Tensor::new([m, n], data).unwrap(), Op::ConcatCols(parts.to_vec()))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let out = self
            .value(a)
            .as_ref()
            .clone()
            .reshape(shape.to_vec())
            .expect("reshape element count");
        self.push(out, Op::Reshape(a))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).transpose2();
        self.push(out, Op::Transpose(a))
    }

    // ----- linear algebra ----------------------------------------------

    /// `op(a) * op(b)` for 2-D operands, with optional transposes.
    pub fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (ar, ac) = shape2(&av);
        let (br, bc) = shape2(&bv);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimension {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), av.data(), ta, bv.data(), tb, T::zero(), &mut out);
        self.push(Tensor::new([m, n], out).unwrap(), Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `x * w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    // ----- vision ------------------------------------------------------

    /// 2-D convolution of `x: [N, C, H, W]` with `w: [O, C, kh, kw]` and bias `b: [O]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let [n, c, h, wd]: [usize; 4] = xv.shape().try_into().expect("conv2d input must be 4-D");
        let [o, c2, kh, kw]: [usize; 4] = wv.shape().try_into().expect("conv2d weight must be 4-D");
        assert_eq!(c, c2, "conv2d channel mismatch");
        assert_eq!(bv.len(), o, "conv2d bias length");
        let (ho, wo) = (conv_out(h, kh, spec), conv_out(wd, kw, spec));
        let ckk = c * kh * kw;
        let hw = ho * wo;
        let mut out = vec![T::zero(); n * o * hw];
        let chunk = conv_chunk(ckk, hw, n);
        let mut cols = vec![T::zero(); ckk * chunk * hw];
        let mut tmp = vec![T::zero(); o * chunk * hw];
        let mut n0 = 0;
        while n0 < n {
            let nb = chunk.min(n - n0);
            let cols = &mut cols[..ckk * nb * hw];
            let tmp = &mut tmp[..o * nb * hw];
            im2col(xv.data(), (c, h, wd), (kh, kw), spec, (ho, wo), n0..n0 + nb, cols);
            T::gemm(o, ckk, nb * hw, T::one(), wv.data(), false, cols, false, T::zero(), tmp);
            for f in 0..nb {
                for oc in 0..o {
                    let src = &tmp[oc * nb * hw + f * hw..oc * nb * hw + (f + 1) * hw];
                    let dst = &mut out[((n0 + f) * o + oc) * hw..((n0 + f) * o + oc + 1) * hw];
                    let bias = bv.data()[oc];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + bias;
                    }
                }
            }
            n0 += nb;
        }
        self.push(Tensor::new([n, o, ho, wo], out).unwrap(), Op::Conv2d { x, w, b, spec })
    }

    /// Group normalization over `[N, C, H, W]`, independently per sample.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let [n, c, h, w]: [usize; 4] = xv.shape().try_into().expect("group_norm input must be 4-D");
        assert!(groups > 0 && c % groups == 0, "channels must divide into groups");
        let cg = c / groups;
        let hw = h * w;
        let gsize = cg * hw;
        let epsv = T::from_f64_lossy(eps);
        let inv = T::one() / T::from_usize(gsize).unwrap();
        let mut out = vec![T::zero(); xv.len()];
        for s in 0..n {
            for g in 0..groups {
                let off = (s * c + g * cg) * hw;
                let xs = &xv.data()[off..off + gsize];
                let mean = xs.iter().copied().sum::<T>() * inv;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
                let rstd = T::one() / (var + epsv).sqrt();
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let (ga, be) = (gv.data()[ch], bv.data()[ch]);
                    for p in 0..hw {
                        let idx = off + ci * hw + p;
                        out[idx] = (xv.data()[idx] - mean) * rstd * ga + be;
                    }
                }
            }
        }
        self.push(
            Tensor::new(xv.shape().to_vec(), out).unwrap(),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            },
        )
    }

    /// Spatial mean over `[N, C, H, W]`, shape `[N, C]`.
    pub fn global_avg_pool(&self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w]: [usize; 4] = xv.shape().try_into().expect("pool input must be 4-D");
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let out: Vec<T> = (0..n * c)
            .map(|i| xv.data()[i * hw..(i + 1) * hw].iter().copied().sum::<T>() * inv)
            .collect();
        self.push(Tensor::new([n, c], out).unwrap(), Op::GlobalAvgPool(x))
    }

    /// Gated temporal shift of `x: [L, C, H, W]` using `gate: [L, 2, H, W]`.
    ///
    /// Channels split into two halves. Within half `h` the gated part
    /// `y = gate[:, h] * x` is removed from its own frame and re-inserted one
    /// frame later (first half) or one frame earlier (second half). Frames
    /// shifted past either end are dropped and the vacated slots are zero.
    pub fn gate_shift(&self, x: Var, gate: Var) -> Var {
        let xv = self.value(x);
        let gv = self.value(gate);
        let [l, c, h, w]: [usize; 4] = xv.shape().try_into().expect("gate_shift input must be 4-D");
        assert_eq!(gv.shape(), [l, 2, h, w], "gate shape");
        assert!(c % 2 == 0, "gate_shift needs an even channel count");
        let half = c / 2;
        let hw = h * w;
        let xd = xv.data();
        let gd = gv.data();
        let y = |t: usize, ch: usize, p: usize| {
            let grp = ch / half;
            gd[(t * 2 + grp) * hw + p] * xd[(t * c + ch) * hw + p]
        };
        let mut out = vec![T::zero(); xv.len()];
        for t in 0..l {
            for ch in 0..c {
                for p in 0..hw {
                    let idx = (t * c + ch) * hw + p;
                    let mut v = xd[idx] - y(t, ch, p);
                    if ch < half {
                        if t >= 1 {
                            v += y(t - 1, ch, p);
                        }
                    } else if t + 1 < l {
                        v += y(t + 1, ch, p);
                    }
                    out[idx] = v;
                }
            }
        }
        self.push(
            Tensor::new(xv.shape().to_vec(), out).unwrap(),
            Op::GateShift { x, gate },
        )
    }

    /// Linear resampling of rows `[start, start + len)` of `x: [L, D]` onto
    /// `m` evenly spaced positions spanning first to last row.
    pub fn resample_rows(&self, x: Var, start: usize, len: usize, m: usize) -> Var {
        let xv = self.value(x);
        let (rows, d) = shape2(&xv);
        assert!(len >= 1 && start + len <= rows, "resample segment out of range");
        assert!(m >= 2, "resample target must be at least 2");
        let mut out = vec![T::zero(); m * d];
        for j in 0..m {
            let (i0, alpha) = resample_anchor(j, len, m);
            let r0 = xv.row(start + i0);
            let dst = &mut out[j * d..(j + 1) * d];
            if alpha == 0.0 {
                dst.copy_from_slice(r0);
            } else {
                let r1 = xv.row(start + i0 + 1);
                let a = T::from_f64_lossy(alpha);
                for ((o, &u), &v) in dst.iter_mut().zip(r0).zip(r1) {
                    *o = (T::one() - a) * u + a * v;
                }
            }
        }
        self.push(Tensor::new([m, d], out).unwrap(), Op::Resample { x, start, len })
    }

    /// Scales each row of `[m, n]` to unit L2 norm; `x / (|x| + eps)`.
    pub fn normalize_rows(&self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (m, n) = shape2(&xv);
        let e = T::from_f64_lossy(eps);
        let mut out = xv.as_ref().clone();
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            row.iter_mut().for_each(|v| *v = *v / (norm + e));
        }
        self.push(out, Op::NormalizeRows { x, eps })
    }

    // ----- backward ----------------------------------------------------

    /// Reverse pass from `output` (any shape; seeded with ones).
    pub fn backward(&self, output: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(nodes[output.0].value.shape().to_vec(), T::one()));

        for i in (0..=output.0).rev() {
            if !nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let out = &nodes[i].value;
            let val = |v: &Var| nodes[v.0].value.clone();
            let needs = |v: &Var| nodes[v.0].requires_grad;
            let mut acc = |v: Var, t: Tensor<T>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };

            match &nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|v| -v));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        acc(*a, zip_map(&g, &val(b), |x, y| x * y));
                    }
                    if needs(b) {
                        acc(*b, zip_map(&g, &val(a), |x, y| x * y));
                    }
                }
                Op::AddRow(a, r) => {
                    if needs(r) {
                        let (m, n) = shape2(&g);
                        let mut gr = vec![T::zero(); n];
                        for row in 0..m {
                            for (o, &v) in gr.iter_mut().zip(g.row(row)) {
                                *o += v;
                            }
                        }
                        acc(*r, Tensor::new(val(r).shape().to_vec(), gr).unwrap());
                    }
                    acc(*a, g);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(*a, g.map(|v| v * s));
                }
                Op::AddScalar(a) => acc(*a, g),
                Op::MulConst(a, c) => acc(*a, zip_map(&g, c, |x, y| x * y)),
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (val(a), val(b));
                    let (gm, gn) = shape2(&g);
                    let k = if *ta { av.shape()[0] } else { av.shape()[1] };
                    if needs(a) {
                        let mut ga = vec![T::zero(); av.len()];
                        if !*ta {
                            // dA[m,k] = dC[m,n] * op(B)^T
                            T::gemm(
                                gm,
                                gn,
                                k,
                                T::one(),
                                g.data(),
                                false,
                                bv.data(),
                                !*tb,
                                T::zero(),
                                &mut ga,
                            );
                        } else {
                            // dA[k,m] = op(B)[k,n] * dC^T
                            T::gemm(k, gn, gm, T::one(), bv.data(), *tb, g.data(), true, T::zero(), &mut ga);
                        }
                        acc(*a, Tensor::new(av.shape().to_vec(), ga).unwrap());
                    }
                    if needs(b) {
                        let mut gb = vec![T::zero(); bv.len()];
                        if !*tb {
                            // dB[k,n] = op(A)^T * dC
                            T::gemm(
                                k,
                                gm,
                                gn,
                                T::one(),
                                av.data(),
                                !*ta,
                                g.data(),
                                false,
                                T::zero(),
                                &mut gb,
                            );
                        } else {
                            // dB[n,k] = dC^T * op(A)
                            T::gemm(gn, gm, k, T::one(), g.data(), true, av.data(), *ta, T::zero(), &mut gb);
                        }
                        acc(*b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
                    }
                }
                Op::Tanh(a) => acc(*a, zip_map(&g, out, |gv, y| gv * (T::one() - y * y))),
                Op::Sigmoid(a) => acc(*a, zip_map(&g, out, |gv, y| gv * y * (T::one() - y))),
                Op::Silu(a) => {
                    let d = zip_map(&g, &val(a), |gv, x| {
                        let s = sigmoid(x);
                        gv * s * (T::one() + x * (T::one() - s))
                    });
                    acc(*a, d);
                }
                Op::Exp(a) => acc(*a, zip_map(&g, out, |gv, y| gv * y)),
                Op::Log(a) => acc(*a, zip_map(&g, &val(a), |gv, x| gv / x)),
                Op::Square(a) => {
                    let two = T::one() + T::one();
                    acc(*a, zip_map(&g, &val(a), |gv, x| gv * two * x));
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    acc(*a, Tensor::full(val(a).shape().to_vec(), s));
                }
                Op::MeanRows(a) => {
                    let av = val(a);
                    let (m, n) = shape2(&av);
                    let inv = T::one() / T::from_usize(m).unwrap();
                    let row: Vec<T> = g.data().iter().map(|&v| v * inv).collect();
                    let data = (0..m).flat_map(|_| row.iter().copied()).collect();
                    acc(*a, Tensor::new([m, n], data).unwrap());
                }
                Op::SumCols(a) => {
                    let av = val(a);
                    let (m, n) = shape2(&av);
                    let data = (0..m).flat_map(|i| std::iter::repeat_n(g.data()[i], n)).collect();
                    acc(*a, Tensor::new([m, n], data).unwrap());
                }
                Op::SoftmaxRows(a) => {
                    let (m, n) = shape2(out);
                    let mut d = vec![T::zero(); m * n];
                    for r in 0..m {
                        let y = out.row(r);
                        let gr = g.row(r);
                        let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            d[r * n + j] = y[j] * (gr[j] - dot);
                        }
                    }
                    acc(*a, Tensor::new([m, n], d).unwrap());
                }
                Op::LogSoftmaxRows(a) => {
                    let (m, n) = shape2(out);
                    let mut d = vec![T::zero(); m * n];
                    for r in 0..m {
                        let y = out.row(r);
                        let gr = g.row(r);
                        let gs: T = gr.iter().copied().sum();
                        for j in 0..n {
                            d[r * n + j] = gr[j] - y[j].exp() * gs;
                        }
                    }
                    acc(*a, Tensor::new([m, n], d).unwrap());
                }
                Op::SliceRows { x, start } => {
                    let xv = val(x);
                    let (_, n) = shape2(&xv);
                    let mut d = Tensor::zeros(xv.shape().to_vec());
                    d.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                    acc(*x, d);
                }
                Op::SliceCols { x, start } => {
                    let xv = val(x);
                    let (m, n) = shape2(&xv);
                    let len = g.shape()[1];
                    let mut d = Tensor::zeros([m, n]);
                    for r in 0..m {
                        d.data_mut()[r * n + start..r * n + start + len].copy_from_slice(g.row(r));
                    }
                    acc(*x, d);
                }
                Op::ConcatRows(parts) => {
                    let n = g.shape()[1];
                    let mut off = 0;
                    for p in parts {
                        let pv = val(p);
                        let len = pv.len();
                        if needs(p) {
                            let d = g.data()[off..off + len].to_vec();
                            acc(*p, Tensor::new(pv.shape().to_vec(), d).unwrap());
                        }
                        off += len;
                        debug_assert_eq!(len % n.max(1), 0);
                    }
                }
                Op::ConcatCols(parts) => {
                    let (m, _) = shape2(&g);
                    let mut col = 0;
                    for p in parts {
                        let pv = val(p);
                        let w = pv.shape()[1];
                        if needs(p) {
                            let mut d = Vec::with_capacity(m * w);
                            for r in 0..m {
                                d.extend_from_slice(&g.row(r)[col..col + w]);
                            }
                            acc(*p, Tensor::new([m, w], d).unwrap());
                        }
                        col += w;
                    }
                }
                Op::Reshape(a) => {
                    let shape = val(a).shape().to_vec();
                    acc(*a, g.reshape(shape).unwrap());
                }
                Op::Transpose(a) => acc(*a, g.transpose2()),
                Op::Conv2d { x, w, b, spec } => {
                    self.conv2d_backward(&g, &val(x), &val(w), *spec, needs(x), needs(w), needs(b))
                        .into_iter()
                        .zip([*x, *w, *b])
                        .for_each(|(t, v)| {
                            if let Some(t) = t {
                                acc(v, t);
                            }
                        });
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    eps,
                } => {
                    let (dx, dg, db) = group_norm_backward(&g, &val(x), &val(gamma), *groups, *eps);
                    acc(*x, dx);
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
                Op::GlobalAvgPool(x) => {
                    let xv = val(x);
                    let hw = xv.shape()[2] * xv.shape()[3];
                    let inv = T::one() / T::from_usize(hw).unwrap();
                    let data = g
                        .data()
                        .iter()
                        .flat_map(|&v| std::iter::repeat_n(v * inv, hw))
                        .collect();
                    acc(*x, Tensor::new(xv.shape().to_vec(), data).unwrap());
                }
                Op::GateShift { x, gate } => {
                    let (dx, dg) = gate_shift_backward(&g, &val(x), &val(gate));
                    acc(*x, dx);
                    acc(*gate, dg);
                }
                Op::Resample { x, start, len } => {
                    let xv = val(x);
                    let (_, d) = shape2(&xv);
                    let m = g.shape()[0];
                    let mut dx = Tensor::zeros(xv.shape().to_vec());
                    for j in 0..m {
                        let (i0, alpha) = resample_anchor(j, *len, m);
                        let a = T::from_f64_lossy(alpha);
                        let gr = g.row(j);
                        let base = (start + i0) * d;
                        for (k, &gv) in gr.iter().enumerate() {
                            dx.data_mut()[base + k] += (T::one() - a) * gv;
                        }
                        if alpha != 0.0 {
                            for (k, &gv) in gr.iter().enumerate() {
                                dx.data_mut()[base + d + k] += a * gv;
                            }
                        }
                    }
                    acc(*x, dx);
                }
                Op::NormalizeRows { x, eps } => {
                    let xv = val(x);
                    let (m, n) = shape2(&xv);
                    let e = T::from_f64_lossy(*eps);
                    let mut dx = vec![T::zero(); m * n];
                    for r in 0..m {
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                        let s = norm + e;
                        let dot: T = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let corr = if norm > T::zero() {
                            dot / (norm * s * s)
                        } else {
                            T::zero()
                        };
                        for k in 0..n {
                            dx[r * n + k] = gr[k] / s - xr[k] * corr;
                        }
                    }
                    acc(*x, Tensor::new([m, n], dx).unwrap());
                }
            }
        }
        Grads { grads }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        g: &Tensor<T>,
        xv: &Tensor<T>,
        wv: &Tensor<T>,
        spec: Conv2dSpec,
        need_x: bool,
        need_w: bool,
        need_b: bool,
    ) -> [Option<Tensor<T>>; 3] {
        let [n, c, h, wd]: [usize; 4] = xv.shape().try_into().unwrap();
        let [o, _, kh, kw]: [usize; 4] = wv.shape().try_into().unwrap();
        let (ho, wo) = (g.shape()[2], g.shape()[3]);
        let hw = ho * wo;
        let ckk = c * kh * kw;
        let mut dx = need_x.then(|| vec![T::zero(); xv.len()]);
        let mut dw = need_w.then(|| vec![T::zero(); wv.len()]);
        let db = need_b.then(|| {
            let mut db = vec![T::zero(); o];
            for s in 0..n {
                for (oc, d) in db.iter_mut().enumerate() {
                    *d += g.data()[(s * o + oc) * hw..(s * o + oc + 1) * hw].iter().copied().sum();
                }
            }
            Tensor::new([o], db).unwrap()
        });
        if need_x || need_w {
            let chunk = conv_chunk(ckk, hw, n);
            let mut cols = vec![T::zero(); ckk * chunk * hw];
            let mut tmp = vec![T::zero(); o * chunk * hw];
            let mut n0 = 0;
            while n0 < n {
                let nb = chunk.min(n - n0);
                let cols = &mut cols[..ckk * nb * hw];
                let tmp = &mut tmp[..o * nb * hw];
                for f in 0..nb {
                    for oc in 0..o {
                        tmp[oc * nb * hw + f * hw..oc * nb * hw + (f + 1) * hw]
                            .copy_from_slice(&g.data()[((n0 + f) * o + oc) * hw..((n0 + f) * o + oc + 1) * hw]);
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    im2col(xv.data(), (c, h, wd), (kh, kw), spec, (ho, wo), n0..n0 + nb, cols);
                    T::gemm(o, nb * hw, ckk, T::one(), tmp, false, cols, true, T::one(), dw);
                }
                if let Some(dx) = dx.as_mut() {
                    T::gemm(ckk, o, nb * hw, T::one(), wv.data(), true, tmp, false, T::zero(), cols);
                    col2im(cols, (c, h, wd), (kh, kw), spec, (ho, wo), n0..n0 + nb, dx);
                }
                n0 += nb;
            }
        }
        [
            dx.map(|d| Tensor::new(xv.shape().to_vec(), d).unwrap()),
            dw.map(|d| Tensor::new(wv.shape().to_vec(), d).unwrap()),
            db,
        ]
    }
}

/// Index of the left neighbour and interpolation weight for output `j`
/// when resampling `len` rows onto `m` positions.
pub(crate) fn resample_anchor(j: usize, len: usize, m: usize) -> (usize, f64) {
    if len == 1 {
        return (0, 0.0);
    }
    let pos = j as f64 * (len - 1) as f64 / (m - 1) as f64;
    let i0 = (pos.floor() as usize).min(len - 1);
    if i0 == len - 1 {
        (i0, 0.0)
    } else {
        (i0, pos - i0 as f64)
    }
}

fn group_norm_backward<T: Scalar>(
    g: &Tensor<T>,
    xv: &Tensor<T>,
    gamma: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w]: [usize; 4] = xv.shape().try_into().unwrap();
    let cg = c / groups;
    let hw = h * w;
    let gsize = cg * hw;
    let inv = T::one() / T::from_usize(gsize).unwrap();
    let epsv = T::from_f64_lossy(eps);
    let mut dx = vec![T::zero(); xv.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut xhat = vec![T::zero(); gsize];
    let mut dxhat = vec![T::zero(); gsize];
    for s in 0..n {
        for grp in 0..groups {
            let off = (s * c + grp * cg) * hw;
            let xs = &xv.data()[off..off + gsize];
            let gs = &g.data()[off..off + gsize];
            let mean = xs.iter().copied().sum::<T>() * inv;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
            let rstd = T::one() / (var + epsv).sqrt();
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for ci in 0..cg {
                let ch = grp * cg + ci;
                for p in 0..hw {
                    let k = ci * hw + p;
                    xhat[k] = (xs[k] - mean) * rstd;
                    dgamma[ch] += gs[k] * xhat[k];
                    dbeta[ch] += gs[k];
                    dxhat[k] = gs[k] * gamma.data()[ch];
                    m1 += dxhat[k];
                    m2 += dxhat[k] * xhat[k];
                }
            }
            m1 *= inv;
            m2 *= inv;
            for k in 0..gsize {
                dx[off + k] = rstd * (dxhat[k] - m1 - xhat[k] * m2);
            }
        }
    }
    (
        Tensor::new(xv.shape().to_vec(), dx).unwrap(),
        Tensor::new(gamma.shape().to_vec(), dgamma).unwrap(),
        Tensor::new(gamma.shape().to_vec(), dbeta).unwrap(),
    )
}

fn gate_shift_backward<T: Scalar>(g: &Tensor<T>, xv: &Tensor<T>, gv: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let [l, c, h, w]: [usize; 4] = xv.shape().try_into().unwrap();
    let half = c / 2;
    let hw = h * w;
    let (gd, xd, gated) = (g.data(), xv.data(), gv.data());
    let mut dx = vec![T::zero(); xv.len()];
    let mut dgate = vec![T::zero(); gv.len()];
    for t in 0..l {
        for ch in 0..c {
            let grp = ch / half;
            for p in 0..hw {
                let idx = (t * c + ch) * hw + p;
                // y[t] leaves frame t and lands on t+1 (first half) or t-1.
                let mut dy = -gd[idx];
                if grp == 0 {
                    if t + 1 < l {
                        dy += gd[((t + 1) * c + ch) * hw + p];
                    }
                } else if t >= 1 {
                    dy += gd[((t - 1) * c + ch) * hw + p];
                }
                let gidx = (t * 2 + grp) * hw + p;
                dx[idx] = gd[idx] + dy * gated[gidx];
                dgate[gidx] += dy * xd[idx];
            }
        }
    }
    (
        Tensor::new(xv.shape().to_vec(), dx).unwrap(),
        Tensor::new(gv.shape().to_vec(), dgate).unwrap(),
    )
}
