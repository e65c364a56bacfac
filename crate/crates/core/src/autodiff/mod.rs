//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each primitive records its
//! output value together with the handles of its inputs; [`Tape::backward`]
//! then walks the record in reverse, so every node is visited once after all
//! of its consumers.
//!
//! ```
//! use smsma::autodiff::Tape;
//! use smsma::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.square(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item().unwrap(), 6.0);
//! ```

pub(crate) mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_index_map, broadcast_shape, reduce_to_shape, Tensor};
use kernels::ConvGeom;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Mean(Var),
    Softmax(Var),
    LogSumExp(Var),
    L2Norm(Var, Vec<usize>),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Dynamic record of primitive operations.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Interprets a 3-D or 4-D image tensor as `[N, C, H, W]`.
fn as_nchw(shape: &[usize]) -> Option<[usize; 4]> {
    match *shape {
        [c, h, w] => Some([1, c, h, w]),
        [n, c, h, w] => Some([n, c, h, w]),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let value = if av.shape() == bv.shape() {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else {
            let shape = broadcast_shape(av.shape(), bv.shape())
                .ok_or_else(|| Error::shape(name, av.shape(), bv.shape()))?;
            let ma = broadcast_index_map(av.shape(), &shape);
            let mb = broadcast_index_map(bv.shape(), &shape);
            let (ad, bd) = (av.data(), bv.data());
            let data = ma.iter().zip(&mb).map(|(&i, &j)| f(ad[i], bd[j])).collect();
            Tensor::new(shape, data)?
        };
        self.push(name, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| -v);
        self.push("neg", value, Op::Neg(a))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v * c);
        self.push("scale", value, Op::Scale(a, c))
    }

    /// Adds a constant.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v + c);
        self.push("offset", value, Op::Offset(a))
    }

    /// `[m,k] · [k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, k2, n) = match (av.shape(), bv.shape()) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            (sa, sb) => return Err(Error::shape("matmul", sa, sb)),
        };
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let data = kernels::matmul(av.data(), bv.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    fn conv_geom(
        &self,
        name: &'static str,
        input: Var,
        kernel: Var,
        transposed: bool,
        stride: usize,
        pad: usize,
    ) -> Result<([usize; 4], [usize; 4], ConvGeom, usize, usize)> {
        let xs = self.shape(input);
        let ks = self.shape(kernel);
        let x4 = as_nchw(xs).ok_or_else(|| Error::shape(name, xs, ks))?;
        let k4: [usize; 4] = ks.try_into().map_err(|_| Error::shape(name, xs, ks))?;
        if stride == 0 || k4[1] == 0 {
            return Err(Error::invalid(format!("{name}: stride must be >= 1")));
        }
        let [_, c, h, w] = x4;
        if transposed {
            // kernel [in, out, kh, kw]
            if k4[0] != c {
                return Err(Error::shape(name, xs, ks));
            }
            let oh = ((h - 1) * stride + k4[2]).checked_sub(2 * pad);
            let ow = ((w - 1) * stride + k4[3]).checked_sub(2 * pad);
            let (oh, ow) = match (oh, ow) {
                (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
                _ => return Err(Error::shape(name, xs, ks)),
            };
            let g = ConvGeom {
                channels: k4[1],
                height: oh,
                width: ow,
                kh: k4[2],
                kw: k4[3],
                stride,
                pad,
            };
            if g.out_h() != h || g.out_w() != w {
                return Err(Error::shape(name, xs, ks));
            }
            Ok((x4, k4, g, oh, ow))
        } else {
            // kernel [out, in, kh, kw]
            if k4[1] != c || h + 2 * pad < k4[2] || w + 2 * pad < k4[3] {
                return Err(Error::shape(name, xs, ks));
            }
            let g = ConvGeom {
                channels: c,
                height: h,
                width: w,
                kh: k4[2],
                kw: k4[3],
                stride,
                pad,
            };
            let (oh, ow) = (g.out_h(), g.out_w());
            Ok((x4, k4, g, oh, ow))
        }
    }

    /// Zero-padded strided cross-correlation.
    ///
    /// `input` is `[C,H,W]` or `[N,C,H,W]`, `kernel` is `[O,C,kh,kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (x4, k4, g, oh, ow) = self.conv_geom("conv2d", input, kernel, false, stride, pad)?;
        let [n, c, h, w] = x4;
        let o = k4[0];
        let xd = self.value(input).data();
        let kd = self.value(kernel).data();
        let mut out = Vec::with_capacity(n * o * oh * ow);
        for s in 0..n {
            let cols = kernels::im2col(&xd[s * c * h * w..(s + 1) * c * h * w], &g);
            out.extend(kernels::matmul(kd, &cols, o, g.col_rows(), g.col_cols()));
        }
        let shape = if self.shape(input).len() == 3 {
            vec![o, oh, ow]
        } else {
            vec![n, o, oh, ow]
        };
        let value = Tensor::new(shape, out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
        )
    }

    /// Transposed convolution (adjoint of [`Tape::conv2d`]).
    ///
    /// `kernel` is `[C_in, C_out, kh, kw]`; the output side is
    /// `(H - 1)·stride - 2·pad + kh`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (x4, k4, g, oh, ow) =
            self.conv_geom("conv_transpose2d", input, kernel, true, stride, pad)?;
        let [n, c, h, w] = x4;
        let co = k4[1];
        let xd = self.value(input).data();
        let kd = self.value(kernel).data();
        let mut out = Vec::with_capacity(n * co * oh * ow);
        for s in 0..n {
            let xs = &xd[s * c * h * w..(s + 1) * c * h * w];
            let cols = kernels::matmul_at(kd, xs, c, g.col_rows(), h * w);
            out.extend(kernels::col2im(&cols, &g));
        }
        let shape = if self.shape(input).len() == 3 {
            vec![co, oh, ow]
        } else {
            vec![n, co, oh, ow]
        };
        let value = Tensor::new(shape, out)?;
        self.push(
            "conv_transpose2d",
            value,
            Op::ConvTranspose2d {
                input,
                kernel,
                stride,
                pad,
            },
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::tanh);
        self.push("tanh", value, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.push("exp", value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let value = self.value(a).map(f64::ln);
        self.push("log", value, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("non-positive input {bad}"),
            });
        }
        let value = self.value(a).map(f64::sqrt);
        self.push("sqrt", value, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v * v);
        self.push("square", value, Op::Square(a))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push("mean", value, Op::Mean(a))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.ndim() {
            return Err(Error::invalid(format!(
                "sum_axis: axis {axis} out of range for {:?}",
                t.shape()
            )));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        self.push("sum_axis", value, Op::SumAxis(a, axis))
    }

    fn last_axis(&self, name: &'static str, a: Var) -> Result<(usize, usize)> {
        let t = self.value(a);
        match t.shape().last() {
            Some(&n) => Ok((t.numel() / n, n)),
            None => Err(Error::invalid(format!("{name}: scalar input"))),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = self.last_axis("softmax", a)?;
        let t = self.value(a);
        let mut out = t.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * n..(r + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(a))
    }

    /// Log-sum-exp over the last axis, removing it.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = self.last_axis("logsumexp", a)?;
        let t = self.value(a);
        let out = (0..rows)
            .map(|r| logsumexp_slice(&t.data()[r * n..(r + 1) * n]))
            .collect();
        let shape = t.shape()[..t.ndim() - 1].to_vec();
        let value = Tensor::new(shape, out)?;
        self.push("logsumexp", value, Op::LogSumExp(a))
    }

    /// Euclidean norm over the flat entries listed in `indices`.
    pub fn l2_norm(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.numel()) {
            return Err(Error::invalid(format!(
                "l2_norm: index {bad} out of range for {:?}",
                t.shape()
            )));
        }
        let ss: f64 = indices.iter().map(|&i| t.data()[i] * t.data()[i]).sum();
        let value = Tensor::scalar(ss.sqrt());
        self.push("l2_norm", value, Op::L2Norm(a, indices.to_vec()))
    }

    /// `input[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(input);
        if axis >= t.ndim() || start >= end || end > t.shape()[axis] {
            return Err(Error::invalid(format!(
                "slice: range {start}..{end} on axis {axis} invalid for {:?}",
                t.shape()
            )));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = width;
        let value = Tensor::new(shape, out)?;
        self.push("slice", value, Op::Slice { input, axis, start })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat: axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let value = t
            .reshape(shape)
            .map_err(|_| Error::shape("reshape", t.shape(), shape))?;
        self.push("reshape", value, Op::Reshape(a))
    }

    /// Selects rows of a tensor by index along axis 0 (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let n = t.shape().first().copied().unwrap_or(0);
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::invalid(format!(
                "gather_rows: row index out of range for {:?}",
                t.shape()
            )));
        }
        let width = t.numel() / n;
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::new(shape, out)?;
        self.push("gather_rows", value, Op::GatherRows(a, rows.to_vec()))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let zip_map = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            let data = a
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(a.shape().to_vec(), data).expect("same shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, reduce_to_shape(g, val(*a).shape()));
                accumulate(grads, *b, reduce_to_shape(g, val(*b).shape()));
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, reduce_to_shape(g, val(*a).shape()));
                accumulate(grads, *b, reduce_to_shape(&g.map(|v| -v), val(*b).shape()));
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ma = broadcast_index_map(av.shape(), g.shape());
                let mb = broadcast_index_map(bv.shape(), g.shape());
                let (ad, bd) = (av.data(), bv.data());
                let is_div = matches!(node.op, Op::Div(..));
                let mut ga = Tensor::zeros(av.shape());
                let mut gb = Tensor::zeros(bv.shape());
                for ((gv, &i), &j) in g.data().iter().zip(&ma).zip(&mb) {
                    if is_div {
                        ga.data_mut()[i] += gv / bd[j];
                        gb.data_mut()[j] -= gv * ad[i] / (bd[j] * bd[j]);
                    } else {
                        ga.data_mut()[i] += gv * bd[j];
                        gb.data_mut()[j] += gv * ad[i];
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Neg(a) => accumulate(grads, *a, g.map(|v| -v)),
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|v| v * c)),
            Op::Offset(a) => accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let ga = kernels::matmul_bt(g.data(), bv.data(), m, n, k);
                let gb = kernels::matmul_at(av.data(), g.data(), m, k, n);
                accumulate(grads, *a, Tensor::new(vec![m, k], ga).expect("shape"));
                accumulate(grads, *b, Tensor::new(vec![k, n], gb).expect("shape"));
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let (x4, k4, geom, _, _) = self
                    .conv_geom("conv2d", *input, *kernel, false, *stride, *pad)
                    .expect("validated in forward");
                let [n, c, h, w] = x4;
                let o = k4[0];
                let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
                let xd = val(*input).data();
                let kd = val(*kernel).data();
                let mut gk = vec![0.0; o * rows];
                let mut gx = Vec::with_capacity(xd.len());
                for s in 0..n {
                    let gs = &g.data()[s * o * cols_n..(s + 1) * o * cols_n];
                    let cols = kernels::im2col(&xd[s * c * h * w..(s + 1) * c * h * w], &geom);
                    let part = kernels::matmul_bt(gs, &cols, o, cols_n, rows);
                    gk.iter_mut().zip(part).for_each(|(a, b)| *a += b);
                    let gcols = kernels::matmul_at(kd, gs, o, rows, cols_n);
                    gx.extend(kernels::col2im(&gcols, &geom));
                }
                let xs = val(*input).shape().to_vec();
                accumulate(grads, *input, Tensor::new(xs, gx).expect("shape"));
                accumulate(grads, *kernel, Tensor::new(k4.to_vec(), gk).expect("shape"));
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let (x4, k4, geom, oh, ow) = self
                    .conv_geom("conv_transpose2d", *input, *kernel, true, *stride, *pad)
                    .expect("validated in forward");
                let [n, c, h, w] = x4;
                let co = k4[1];
                let rows = geom.col_rows();
                let xd = val(*input).data();
                let kd = val(*kernel).data();
                let mut gk = vec![0.0; c * rows];
                let mut gx = Vec::with_capacity(xd.len());
                for s in 0..n {
                    let gs = &g.data()[s * co * oh * ow..(s + 1) * co * oh * ow];
                    let gcols = kernels::im2col(gs, &geom);
                    gx.extend(kernels::matmul(kd, &gcols, c, rows, h * w));
                    let xs = &xd[s * c * h * w..(s + 1) * c * h * w];
                    let part = kernels::matmul_bt(xs, &gcols, c, h * w, rows);
                    gk.iter_mut().zip(part).for_each(|(a, b)| *a += b);
                }
                let xs = val(*input).shape().to_vec();
                accumulate(grads, *input, Tensor::new(xs, gx).expect("shape"));
                accumulate(grads, *kernel, Tensor::new(k4.to_vec(), gk).expect("shape"));
            }
            Op::Relu(a) => {
                let ga = zip_map(val(*a), &|x, gv| if x > 0.0 { gv } else { 0.0 });
                accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => accumulate(grads, *a, zip_map(out, &|y, gv| gv * (1.0 - y * y))),
            Op::Exp(a) => accumulate(grads, *a, zip_map(out, &|y, gv| gv * y)),
            Op::Log(a) => accumulate(grads, *a, zip_map(val(*a), &|x, gv| gv / x)),
            Op::Sqrt(a) => accumulate(grads, *a, zip_map(out, &|y, gv| gv * 0.5 / y)),
            Op::Square(a) => accumulate(grads, *a, zip_map(val(*a), &|x, gv| gv * 2.0 * x)),
            Op::Sum(a) => {
                let gv = g.data()[0];
                accumulate(grads, *a, Tensor::full(val(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let t = val(*a);
                let gv = g.data()[0] / t.numel() as f64;
                accumulate(grads, *a, Tensor::full(t.shape(), gv));
            }
            Op::SumAxis(a, axis) => {
                let t = val(*a);
                let (outer, len, inner) = split_axis(t.shape(), *axis);
                let mut ga = Vec::with_capacity(t.numel());
                for o in 0..outer {
                    for _ in 0..len {
                        ga.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(
                    grads,
                    *a,
                    Tensor::new(t.shape().to_vec(), ga).expect("shape"),
                );
            }
            Op::Softmax(a) => {
                let n = *out.shape().last().expect("non-scalar");
                let mut ga = vec![0.0; out.numel()];
                for (r, chunk) in ga.chunks_mut(n).enumerate() {
                    let y = &out.data()[r * n..(r + 1) * n];
                    let gy = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for ((dst, &yi), &gi) in chunk.iter_mut().zip(y).zip(gy) {
                        *dst = yi * (gi - dot);
                    }
                }
                accumulate(
                    grads,
                    *a,
                    Tensor::new(out.shape().to_vec(), ga).expect("shape"),
                );
            }
            Op::LogSumExp(a) => {
                let t = val(*a);
                let n = *t.shape().last().expect("non-scalar");
                let mut ga = vec![0.0; t.numel()];
                for (r, chunk) in ga.chunks_mut(n).enumerate() {
                    let lse = out.data()[r];
                    let gr = g.data()[r];
                    for (dst, &x) in chunk.iter_mut().zip(&t.data()[r * n..(r + 1) * n]) {
                        *dst = gr * (x - lse).exp();
                    }
                }
                accumulate(
                    grads,
                    *a,
                    Tensor::new(t.shape().to_vec(), ga).expect("shape"),
                );
            }
            Op::L2Norm(a, indices) => {
                let t = val(*a);
                let norm = out.data()[0];
                let mut ga = Tensor::zeros(t.shape());
                if norm > 0.0 {
                    let scale = g.data()[0] / norm;
                    for &i in indices {
                        ga.data_mut()[i] += scale * t.data()[i];
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Slice { input, axis, start } => {
                let t = val(*input);
                let (outer, len, inner) = split_axis(t.shape(), *axis);
                let width = out.shape()[*axis];
                let mut ga = Tensor::zeros(t.shape());
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    let src = o * width * inner;
                    ga.data_mut()[dst..dst + width * inner]
                        .copy_from_slice(&g.data()[src..src + width * inner]);
                }
                accumulate(grads, *input, ga);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let t = val(v);
                    let width = t.shape()[*axis];
                    let mut gv = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        gv.extend_from_slice(&g.data()[src..src + width * inner]);
                    }
                    offset += width;
                    accumulate(
                        grads,
                        v,
                        Tensor::new(t.shape().to_vec(), gv).expect("shape"),
                    );
                }
            }
            Op::Reshape(a) => {
                let ga = g.reshape(val(*a).shape()).expect("same numel");
                accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, rows) => {
                let t = val(*a);
                let width = t.numel() / t.shape()[0];
                let mut ga = Tensor::zeros(t.shape());
                for (k, &r) in rows.iter().enumerate() {
                    let src = &g.data()[k * width..(k + 1) * width];
                    for (dst, &v) in ga.data_mut()[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(src)
                    {
                        *dst += v;
                    }
                }
                accumulate(grads, *a, ga);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Numerically stable `ln Σ exp(x_i)`.
pub fn logsumexp_slice(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests;
