//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive appends one node to the tape; a node's inputs always have
//! smaller indices, so the tape is already topologically ordered and
//! `backward` is a single reverse sweep.

use crate::tensor::{broadcast_index_map, broadcast_shape, numel, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on both sides; requires odd `k`.
    Same,
    Valid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Expm1(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    Softplus(Var),
    SmoothL1(Var),
    Sum(Var),
    Mean(Var),
    LogSoftmax(Var),
    Matmul(Var, Var),
    Conv1d {
        x: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    BroadcastTo(Var),
    Index(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when `v` does not require gradients or is
    /// not reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a leaf. Gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Copies the current value of `v` into a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some((index, &value)) = value.data().iter().enumerate().find(|(_, x)| !x.is_finite()) {
            return Err(TensorError::NonFinite {
                op: op_name,
                index,
                value,
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
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
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_index_map(&sa, &out_shape);
            let mb = broadcast_index_map(&sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let value = Tensor::new(out_shape, data)?;
        self.push(name, value, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(name, value, op, &[a])
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
        if let Some(i) = self.value(b).data().iter().position(|&x| x == 0.0) {
            return Err(TensorError::Domain {
                op: "div",
                detail: format!("division by zero at divisor index {i}"),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("shift", a, |x| x + c, Op::Shift(a))
    }

    /// `1 - a`, used for complementary attention.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        self.shift(n, 1.0)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    /// `exp(a) - 1`, accurate near zero.
    pub fn expm1(&mut self, a: Var) -> Result<Var> {
        self.unary("expm1", a, f64::exp_m1, Op::Expm1(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((i, &x)) = self.value(a).data().iter().enumerate().find(|(_, &x)| x <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {x} at index {i}"),
            });
        }
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    /// Logistic sigmoid, clamped so the output stays strictly inside (0, 1).
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        const HI: f64 = 1.0 - f64::EPSILON / 2.0;
        self.unary("sigmoid", a, |x| sigmoid(x).clamp(f64::MIN_POSITIVE, HI), Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    /// Elementwise Huber penalty with unit transition point.
    pub fn smooth_l1(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "smooth_l1",
            a,
            |x| if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 },
            Op::SmoothL1(a),
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Row-wise log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let cols = *v.shape().last().unwrap_or(&1);
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        self.push("log_softmax", value, Op::LogSoftmax(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::Matmul(a, b), &[a, b])
    }

    /// Temporal convolution of `x: [T × D_in]` with `kernel: [k × D_in × D_out]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 2 || sk.len() != 3 || sx[1] != sk[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: sx,
                rhs: sk,
            });
        }
        if stride == 0 {
            return Err(TensorError::Domain {
                op: "conv1d",
                detail: "stride must be positive".into(),
            });
        }
        let (t, d_in, k, d_out) = (sx[0], sx[1], sk[0], sk[2]);
        let pad = match padding {
            Padding::Same if k % 2 == 0 => {
                return Err(TensorError::Domain {
                    op: "conv1d",
                    detail: format!("same padding needs an odd kernel, got k={k}"),
                })
            }
            Padding::Same => (k - 1) / 2,
            Padding::Valid if k > t => {
                return Err(TensorError::EmptyOutput {
                    op: "conv1d",
                    detail: format!("kernel {k} longer than sequence {t} with valid padding"),
                })
            }
            Padding::Valid => 0,
        };
        let t_out = (t + 2 * pad - k) / stride + 1;
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let mut out = vec![0.0; t_out * d_out];
        for o in 0..t_out {
            let orow = &mut out[o * d_out..(o + 1) * d_out];
            for i in 0..k {
                let Some(src) = (o * stride + i).checked_sub(pad).filter(|&s| s < t) else {
                    continue;
                };
                let xrow = &xv[src * d_in..(src + 1) * d_in];
                for (c, &xc) in xrow.iter().enumerate() {
                    let krow = &kv[(i * d_in + c) * d_out..(i * d_in + c + 1) * d_out];
                    for (acc, &w) in orow.iter_mut().zip(krow) {
                        *acc += xc * w;
                    }
                }
            }
        }
        let value = Tensor::new(vec![t_out, d_out], out)?;
        self.push(
            "conv1d",
            value,
            Op::Conv1d {
                x,
                kernel,
                stride,
                pad,
            },
            &[x, kernel],
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                lhs: s,
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Concatenates two matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: sa,
                rhs: sb,
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(va.numel() + vb.numel());
        for r in 0..sa[0] {
            out.extend_from_slice(va.row(r));
            out.extend_from_slice(vb.row(r));
        }
        let value = Tensor::new(vec![sa[0], sa[1] + sb[1]], out)?;
        self.push("concat_cols", value, Op::ConcatCols(a, b), &[a, b])
    }

    /// Selects rows by index (repeats allowed); the backward pass scatter-adds.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let rows = v.rows();
        if indices.is_empty() {
            return Err(TensorError::EmptyOutput {
                op: "gather_rows",
                detail: "no row indices".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Domain {
                op: "gather_rows",
                detail: format!("row {bad} out of range for {rows} rows"),
            });
        }
        let mut shape = v.shape().to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = indices.len();
        let mut out = Vec::with_capacity(indices.len() * v.cols());
        for &i in indices {
            out.extend_from_slice(v.row(i));
        }
        let value = Tensor::new(shape, out)?;
        self.push("gather_rows", value, Op::GatherRows(a, indices.to_vec()), &[a])
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if broadcast_shape(&sa, shape).as_deref() != Some(shape) {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast",
                lhs: sa,
                rhs: shape.to_vec(),
            });
        }
        let map = broadcast_index_map(&sa, shape);
        let v = self.value(a).data();
        let value = Tensor::new(shape.to_vec(), map.iter().map(|&i| v[i]).collect())?;
        self.push("broadcast", value, Op::BroadcastTo(a), &[a])
    }

    /// Picks one element by flat index as a scalar.
    pub fn index(&mut self, a: Var, flat: usize) -> Result<Var> {
        let v = self.value(a);
        if flat >= v.numel() {
            return Err(TensorError::Domain {
                op: "index",
                detail: format!("flat index {flat} out of range for {:?}", v.shape()),
            });
        }
        let value = Tensor::scalar(v.data()[flat]);
        self.push("index", value, Op::Index(a, flat), &[a])
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// across fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if numel(loss_shape) != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|g| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), g)
                        .expect("gradient buffer matches node shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        contrib(buf);
    }

    /// Reduces an output-shaped gradient onto a broadcast operand.
    fn accumulate_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        out_shape: &[usize],
        g: &[f64],
        scale: impl Fn(usize) -> f64,
    ) {
        let src_shape = self.shape(v).to_vec();
        let map = broadcast_index_map(&src_shape, out_shape);
        self.accumulate(grads, v, |buf| {
            for (o, &i) in map.iter().enumerate() {
                buf[i] += g[o] * scale(o);
            }
        });
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let elementwise = |grads: &mut [Option<Vec<f64>>], a: Var, d: &dyn Fn(usize) -> f64| {
            self.accumulate(grads, a, |buf| {
                for (i, b) in buf.iter_mut().enumerate() {
                    *b += g[i] * d(i);
                }
            });
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_broadcast(grads, *a, out.shape(), g, |_| 1.0);
                self.accumulate_broadcast(grads, *b, out.shape(), g, |_| 1.0);
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(grads, *a, out.shape(), g, |_| 1.0);
                self.accumulate_broadcast(grads, *b, out.shape(), g, |_| -1.0);
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(op, Op::Div(..));
                let ma = broadcast_index_map(self.shape(*a), out.shape());
                let mb = broadcast_index_map(self.shape(*b), out.shape());
                let (va, vb) = (val(*a), val(*b));
                if is_div {
                    self.accumulate_broadcast(grads, *a, out.shape(), g, |o| 1.0 / vb[mb[o]]);
                    self.accumulate_broadcast(grads, *b, out.shape(), g, |o| {
                        -va[ma[o]] / (vb[mb[o]] * vb[mb[o]])
                    });
                } else {
                    self.accumulate_broadcast(grads, *a, out.shape(), g, |o| vb[mb[o]]);
                    self.accumulate_broadcast(grads, *b, out.shape(), g, |o| va[ma[o]]);
                }
            }
            Op::Neg(a) => elementwise(grads, *a, &|_| -1.0),
            Op::Scale(a, c) => elementwise(grads, *a, &|_| *c),
            Op::Shift(a) => elementwise(grads, *a, &|_| 1.0),
            Op::Exp(a) => elementwise(grads, *a, &|i| out.data()[i]),
            Op::Expm1(a) => elementwise(grads, *a, &|i| out.data()[i] + 1.0),
            Op::Log(a) => {
                let x = val(*a);
                elementwise(grads, *a, &|i| 1.0 / x[i])
            }
            Op::Sigmoid(a) => elementwise(grads, *a, &|i| {
                let s = out.data()[i];
                s * (1.0 - s)
            }),
            Op::Relu(a) => {
                let x = val(*a);
                elementwise(grads, *a, &|i| if x[i] > 0.0 { 1.0 } else { 0.0 })
            }
            Op::Square(a) => {
                let x = val(*a);
                elementwise(grads, *a, &|i| 2.0 * x[i])
            }
            Op::Softplus(a) => {
                let x = val(*a);
                elementwise(grads, *a, &|i| sigmoid(x[i]))
            }
            Op::SmoothL1(a) => {
                let x = val(*a);
                elementwise(grads, *a, &|i| if x[i].abs() < 1.0 { x[i] } else { x[i].signum() })
            }
            Op::Sum(a) => self.accumulate(grads, *a, |buf| buf.iter_mut().for_each(|b| *b += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                self.accumulate(grads, *a, |buf| buf.iter_mut().for_each(|b| *b += g[0] / n))
            }
            Op::LogSoftmax(a) => {
                let cols = *out.shape().last().unwrap_or(&1);
                self.accumulate(grads, *a, |buf| {
                    for ((brow, orow), grow) in buf
                        .chunks_mut(cols)
                        .zip(out.data().chunks(cols))
                        .zip(g.chunks(cols))
                    {
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..cols {
                            brow[j] += grow[j] - orow[j].exp() * gsum;
                        }
                    }
                })
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                // dA = G · Bᵀ, dB = Aᵀ · G
                self.accumulate(grads, *a, |buf| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * vb[p * n + j];
                            }
                            buf[i * k + p] += s;
                        }
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for i in 0..m {
                        for p in 0..k {
                            let x = va[i * k + p];
                            for j in 0..n {
                                buf[p * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Conv1d {
                x,
                kernel,
                stride,
                pad,
            } => {
                let (sx, sk) = (self.shape(*x), self.shape(*kernel));
                let (t, d_in, k, d_out) = (sx[0], sx[1], sk[0], sk[2]);
                let t_out = out.shape()[0];
                let (xv, kv) = (val(*x), val(*kernel));
                let taps = |o: usize, i: usize| (o * stride + i).checked_sub(*pad).filter(|&s| s < t);
                self.accumulate(grads, *x, |buf| {
                    for o in 0..t_out {
                        let grow = &g[o * d_out..(o + 1) * d_out];
                        for i in 0..k {
                            let Some(src) = taps(o, i) else { continue };
                            for c in 0..d_in {
                                let krow = &kv[(i * d_in + c) * d_out..(i * d_in + c + 1) * d_out];
                                buf[src * d_in + c] += krow.iter().zip(grow).map(|(w, gg)| w * gg).sum::<f64>();
                            }
                        }
                    }
                });
                self.accumulate(grads, *kernel, |buf| {
                    for o in 0..t_out {
                        let grow = &g[o * d_out..(o + 1) * d_out];
                        for i in 0..k {
                            let Some(src) = taps(o, i) else { continue };
                            for c in 0..d_in {
                                let xc = xv[src * d_in + c];
                                let brow = &mut buf[(i * d_in + c) * d_out..(i * d_in + c + 1) * d_out];
                                for (b, gg) in brow.iter_mut().zip(grow) {
                                    *b += xc * gg;
                                }
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                self.accumulate(grads, *a, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                })
            }
            Op::Reshape(a) => elementwise(grads, *a, &|_| 1.0),
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.shape(*a)[1], self.shape(*b)[1]);
                let rows = out.shape()[0];
                self.accumulate(grads, *a, |buf| {
                    for r in 0..rows {
                        for j in 0..ca {
                            buf[r * ca + j] += g[r * (ca + cb) + j];
                        }
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for r in 0..rows {
                        for j in 0..cb {
                            buf[r * cb + j] += g[r * (ca + cb) + ca + j];
                        }
                    }
                });
            }
            Op::GatherRows(a, indices) => {
                let cols = self.nodes[a.0].value.cols();
                self.accumulate(grads, *a, |buf| {
                    for (o, &src) in indices.iter().enumerate() {
                        for j in 0..cols {
                            buf[src * cols + j] += g[o * cols + j];
                        }
                    }
                })
            }
            Op::BroadcastTo(a) => self.accumulate_broadcast(grads, *a, out.shape(), g, |_| 1.0),
            Op::Index(a, flat) => self.accumulate(grads, *a, |buf| buf[*flat] += g[0]),
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            for (o, &w) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += x * w;
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn selector_row() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let v = tape.constant(Tensor::from_rows(&[vec![7.5], vec![-2.0]]).unwrap());
        let p = tape.matmul(s, v).unwrap();
        assert_eq!(tape.value(p).data(), &[7.5]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let xv = tape.constant(x.clone());
        let k = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = tape.conv1d(xv, k, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn conv_output_lengths() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[9, 1], 1.0));
        let k = tape.constant(Tensor::full(&[3, 1, 1], 1.0));
        let same = tape.conv1d(x, k, 1, Padding::Same).unwrap();
        assert_eq!(tape.shape(same), &[9, 1]);
        let strided = tape.conv1d(x, k, 2, Padding::Same).unwrap();
        assert_eq!(tape.shape(strided), &[5, 1]);
        let valid = tape.conv1d(x, k, 2, Padding::Valid).unwrap();
        assert_eq!(tape.shape(valid), &[4, 1]);
        // interior frames see all three taps, edges only two
        assert_eq!(tape.value(same).data()[0], 2.0);
        assert_eq!(tape.value(same).data()[4], 3.0);
    }

    #[test]
    fn conv_zero_input_gives_zero_or_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[5, 3]));
        let k = tape.constant(Tensor::full(&[3, 3, 2], 0.7));
        let y = tape.conv1d(x, k, 1, Padding::Same).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let bias = tape.constant(Tensor::new(vec![2], vec![0.25, -1.0]).unwrap());
        let yb = tape.add(y, bias).unwrap();
        for r in 0..5 {
            assert_eq!(tape.value(yb).row(r), &[0.25, -1.0]);
        }
    }

    #[test]
    fn conv_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 1]));
        let k3 = tape.constant(Tensor::zeros(&[3, 1, 1]));
        let k2 = tape.constant(Tensor::zeros(&[2, 1, 1]));
        assert!(matches!(
            tape.conv1d(x, k3, 1, Padding::Valid),
            Err(TensorError::EmptyOutput { .. })
        ));
        assert!(matches!(
            tape.conv1d(x, k2, 1, Padding::Same),
            Err(TensorError::Domain { .. })
        ));
    }

    #[test]
    fn sigmoid_of_zero_and_extremes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![0.0, 800.0, -800.0]).unwrap());
        let s = tape.sigmoid(x).unwrap();
        let v = tape.value(s).data();
        assert_eq!(v[0], 0.5);
        assert!(v[1] < 1.0 && v[2] > 0.0);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(tape.log(x), Err(TensorError::Domain { op: "log", .. })));
    }

    #[test]
    fn exp_overflow_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1000.0));
        assert!(matches!(tape.exp(x), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn mean_spreads_gradient_evenly() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![4], vec![1.0, -3.0, 2.0, 0.5]).unwrap());
        let m = tape.mean(x).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn identity_loss_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let g = tape.backward(x).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert_eq!(
            tape.backward(x).unwrap_err(),
            TensorError::NonScalarLoss(vec![2])
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(w, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(w).unwrap().item(), 5.0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0));
        let sq = tape.square(w).unwrap();
        let d = tape.detach(sq);
        let y = tape.mul(d, w).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(w).unwrap().item(), 4.0);
    }

    #[test]
    fn log_softmax_rows_normalise() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]).unwrap());
        let ls = tape.log_softmax(x).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(ls).row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
