//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied to its variables together with
//! whatever the backward rule needs (argmax positions, LU factors, ...).
//! [`Tape::backward`] then walks the record in exact reverse order and
//! accumulates vector-Jacobian products into per-node gradient buffers.
//!
//! Binary elementwise ops accept operands of identical shape, or a right-hand
//! operand whose shape equals the trailing dimensions of the left-hand one
//! (a bias `[d]` added to `[n, d]`, a scalar `[]` added to anything). Every
//! other mismatch is an error.

use crate::error::TensorError;
use crate::linalg::{gemm, Lu};
use crate::tensor::{split_axis, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Gather {
        src: Var,
        indices: Vec<usize>,
    },
    Reshape(Var),
    ReduceMax {
        src: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    ReduceSum {
        src: Var,
        axis: usize,
    },
    ReduceMean {
        src: Var,
        axis: usize,
    },
    SumAll(Var),
    Softmax {
        src: Var,
        axis: usize,
    },
    SquaredNorm(Var),
    Sqrt(Var),
    Huber(Var, f64),
    Log(Var),
    Exp(Var),
    PairwiseSqDist(Var, Var),
    TpsKernel(Var),
    Solve {
        lhs: Var,
        rhs: Var,
        lu: Box<Lu>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss through differentiable leaves.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, materializing zeros when it did not receive any.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Records a forward computation for later reverse traversal.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault_injection: bool,
}

fn trailing_compatible(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose matrix-product backward rule is deliberately wrong.
    /// Used to prove that the gradient battery detects faulty gradients.
    pub fn with_fault_injection() -> Self {
        Self {
            nodes: Vec::new(),
            fault_injection: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input (parameter or probe).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    // ---------------------------------------------------------------- forward

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), ng))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool), TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !trailing_compatible(ta.shape(), tb.shape()) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let bd = tb.data();
        let n = bd.len();
        let data: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % n]))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok((out, self.ng(a) || self.ng(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, ng) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, ng) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, ng) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x * c);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x + c);
        let ng = self.ng(a);
        self.push(t, Op::AddScalar(a), ng)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same length")
    }

    /// `max(x, slope * x)`; `slope = 0` gives a plain rectifier. The
    /// derivative at exactly zero is taken from the negative side.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.map(a, |x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(t, Op::LeakyRelu(a, slope), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat" })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::BadAxis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(base.iter())
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Selects rows along axis 0; indices may repeat.
    pub fn gather(&mut self, src: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(src);
        if t.ndim() == 0 {
            return Err(TensorError::BadAxis {
                op: "gather",
                axis: 0,
                shape: vec![],
            });
        }
        let rows = t.shape()[0];
        let rl = t.row_len();
        let mut out = Vec::with_capacity(indices.len() * rl);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather",
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(t.row(i));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let ng = self.ng(src);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Gather {
                src,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a).clone().reshaped(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<(), TensorError> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(TensorError::BadAxis {
                op,
                axis,
                shape: s.to_vec(),
            });
        }
        if s[axis] == 0 {
            return Err(TensorError::Empty { op });
        }
        Ok(())
    }

    fn reduced_shape(&self, a: Var, axis: usize) -> Vec<usize> {
        let mut s = self.shape(a).to_vec();
        s.remove(axis);
        s
    }

    /// Maximum along `axis`; ties resolve to the lowest index, and the
    /// gradient is routed only to that position.
    pub fn reduce_max(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("reduce_max", a, axis)?;
        let t = self.value(a);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = 0;
                let mut bv = d[base];
                for l in 1..len {
                    let v = d[base + l * inner];
                    if v > bv {
                        bv = v;
                        best = l;
                    }
                }
                out.push(bv);
                argmax.push(best);
            }
        }
        let shape = self.reduced_shape(a, axis);
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::ReduceMax {
                src: a,
                axis,
                argmax,
            },
            ng,
        ))
    }

    fn reduce_sum_values(&self, a: Var, axis: usize) -> Vec<f64> {
        let t = self.value(a);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        out
    }

    pub fn reduce_sum(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("reduce_sum", a, axis)?;
        let out = self.reduce_sum_values(a, axis);
        let shape = self.reduced_shape(a, axis);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::ReduceSum { src: a, axis }, ng))
    }

    pub fn reduce_mean(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("reduce_mean", a, axis)?;
        let len = self.shape(a)[axis] as f64;
        let mut out = self.reduce_sum_values(a, axis);
        out.iter_mut().for_each(|v| *v /= len);
        let shape = self.reduced_shape(a, axis);
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::ReduceMean { src: a, axis },
            ng,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    /// Mean of all elements, as a scalar. Errors on an empty tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::Empty { op: "mean" });
        }
        let s = self.sum(a);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("softmax", a, axis)?;
        let t = self.value(a);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| d[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (d[at(l)] - m).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { src: a, axis }, ng))
    }

    /// Sum of squares over the last axis.
    pub fn squared_norm(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.ndim() == 0 {
            return Err(TensorError::BadAxis {
                op: "squared_norm",
                axis: 0,
                shape: vec![],
            });
        }
        let last = *t.shape().last().unwrap();
        let out: Vec<f64> = if last == 0 {
            vec![0.0; t.len()]
        } else {
            t.data()
                .chunks(last)
                .map(|c| c.iter().map(|v| v * v).sum())
                .collect()
        };
        let shape = t.shape()[..t.ndim() - 1].to_vec();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::SquaredNorm(a), ng))
    }

    /// Elementwise square root. The derivative at zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0).sqrt());
        let ng = self.ng(a);
        self.push(t, Op::Sqrt(a), ng)
    }

    /// `x^2 / 2` for `|x| <= delta`, `delta (|x| - delta / 2)` otherwise.
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        let t = self.map(a, |x| huber(x, delta));
        let ng = self.ng(a);
        self.push(t, Op::Huber(a, delta), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::ln);
        let ng = self.ng(a);
        self.push(t, Op::Log(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::exp);
        let ng = self.ng(a);
        self.push(t, Op::Exp(a), ng)
    }

    /// Squared Euclidean distances between the rows of `a` (`[n, d]`) and the
    /// rows of `b` (`[m, d]`), giving `[n, m]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "pairwise_sq_dist",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (n, m) = (ta.shape()[0], tb.shape()[0]);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let ra = ta.row(i);
            for j in 0..m {
                let rb = tb.row(j);
                out.push(ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::PairwiseSqDist(a, b), ng))
    }

    /// Thin-plate radial kernel evaluated on squared radii:
    /// `U = r^2 ln r = s ln(s) / 2` for `s = r^2`, with `U(0) = 0`.
    pub fn tps_kernel(&mut self, s: Var) -> Var {
        let t = self.map(s, tps_kernel_sq);
        let ng = self.ng(s);
        self.push(t, Op::TpsKernel(s), ng)
    }

    /// Solves `lhs * X = rhs` for square `lhs` (`[n, n]`) and `rhs` (`[n, m]`).
    pub fn solve(&mut self, lhs: Var, rhs: Var) -> Result<Var, TensorError> {
        let (tl, tr) = (self.value(lhs), self.value(rhs));
        if tl.ndim() != 2
            || tl.shape()[0] != tl.shape()[1]
            || tr.ndim() != 2
            || tr.shape()[0] != tl.shape()[0]
        {
            return Err(TensorError::ShapeMismatch {
                op: "solve",
                lhs: tl.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        let (n, m) = (tl.shape()[0], tr.shape()[1]);
        let lu = Lu::factor(n, tl.data())?;
        let x = lu.solve(tr.data(), m);
        let ng = self.ng(lhs) || self.ng(rhs);
        Ok(self.push(
            Tensor::new(vec![n, m], x)?,
            Op::Solve {
                lhs,
                rhs,
                lu: Box::new(lu),
            },
            ng,
        ))
    }

    // --------------------------------------------------------------- backward

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.needs_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let fudge = if self.fault_injection { 1.01 } else { 1.0 };
                self.acc(grads, *a, |ga| {
                    // dA += G B^T
                    let mut tmp = vec![0.0; m * k];
                    gemm(m, n, k, g, false, tb.data(), true, &mut tmp, 0.0);
                    for (x, t) in ga.iter_mut().zip(tmp) {
                        *x += fudge * t;
                    }
                });
                self.acc(grads, *b, |gb| {
                    // dB += A^T G
                    gemm(k, m, n, ta.data(), true, g, false, gb, 1.0);
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[1], out.shape()[0]);
                self.acc(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[idx].op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                self.acc(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
                self.acc(grads, *b, |gb| {
                    let n = gb.len();
                    for (i, y) in g.iter().enumerate() {
                        gb[i % n] += sign * y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let n = tb.len();
                self.acc(grads, *a, |ga| {
                    for (i, y) in g.iter().enumerate() {
                        ga[i] += y * tb[i % n];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for (i, y) in g.iter().enumerate() {
                        gb[i % n] += y * ta[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.acc(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
            }
            Op::LeakyRelu(a, slope) => {
                let ta = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += if ta[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    self.acc(grads, p, |gp| {
                        for o in 0..outer {
                            let src = &g
                                [(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (x, y) in gp[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                            {
                                *x += y;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Gather { src, indices } => {
                let rl = self.value(*src).row_len();
                self.acc(grads, *src, |gs| {
                    for (r, &i) in indices.iter().enumerate() {
                        for (x, y) in gs[i * rl..(i + 1) * rl]
                            .iter_mut()
                            .zip(&g[r * rl..(r + 1) * rl])
                        {
                            *x += y;
                        }
                    }
                });
            }
            Op::ReduceMax { src, axis, argmax } => {
                let (outer, len, inner) = split_axis(self.shape(*src), *axis);
                self.acc(grads, *src, |gs| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let l = argmax[o * inner + i];
                            gs[(o * len + l) * inner + i] += g[o * inner + i];
                        }
                    }
                });
            }
            Op::ReduceSum { src, axis } | Op::ReduceMean { src, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*src), *axis);
                let f = if matches!(self.nodes[idx].op, Op::ReduceMean { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                self.acc(grads, *src, |gs| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                gs[(o * len + l) * inner + i] += f * g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Softmax { src, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                self.acc(grads, *src, |gs| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                gs[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::SquaredNorm(a) => {
                let ta = self.value(*a);
                let last = *ta.shape().last().unwrap();
                let d = ta.data();
                self.acc(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += 2.0 * d[i] * g[i / last];
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = out.data();
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        if y[i] > 0.0 {
                            ga[i] += g[i] / (2.0 * y[i]);
                        }
                    }
                });
            }
            Op::Huber(a, delta) => {
                let d = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * d[i].clamp(-delta, *delta);
                    }
                });
            }
            Op::Log(a) => {
                let d = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / d[i];
                    }
                });
            }
            Op::Exp(a) => {
                let y = out.data();
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * y[i];
                    }
                });
            }
            Op::PairwiseSqDist(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, m, dim) = (ta.shape()[0], tb.shape()[0], ta.shape()[1]);
                self.acc(grads, *a, |ga| {
                    for i in 0..n {
                        for j in 0..m {
                            let w = 2.0 * g[i * m + j];
                            if w == 0.0 {
                                continue;
                            }
                            for c in 0..dim {
                                ga[i * dim + c] +=
                                    w * (ta.data()[i * dim + c] - tb.data()[j * dim + c]);
                            }
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..n {
                        for j in 0..m {
                            let w = 2.0 * g[i * m + j];
                            if w == 0.0 {
                                continue;
                            }
                            for c in 0..dim {
                                gb[j * dim + c] -=
                                    w * (ta.data()[i * dim + c] - tb.data()[j * dim + c]);
                            }
                        }
                    }
                });
            }
            Op::TpsKernel(s) => {
                let d = self.value(*s).data();
                self.acc(grads, *s, |gs| {
                    for i in 0..gs.len() {
                        if d[i] > 0.0 {
                            gs[i] += g[i] * 0.5 * (d[i].ln() + 1.0);
                        }
                    }
                });
            }
            Op::Solve { lhs, rhs, lu } => {
                let m = out.shape()[1];
                let n = lu.dim();
                // dRhs = L^-T G, dLhs = -dRhs X^T
                let grhs = lu.solve_transpose(g, m);
                self.acc(grads, *lhs, |gl| {
                    let mut tmp = vec![0.0; n * n];
                    gemm(n, m, n, &grhs, false, out.data(), true, &mut tmp, 0.0);
                    for (v, t) in gl.iter_mut().zip(tmp) {
                        *v -= t;
                    }
                });
                self.acc(grads, *rhs, |gr| {
                    gr.iter_mut().zip(&grhs).for_each(|(x, y)| *x += y);
                });
            }
        }
    }
}

/// Huber penalty with threshold `delta`.
pub fn huber(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * x * x
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// `s ln(s) / 2`, the thin-plate kernel `r^2 ln r` written in terms of `s = r^2`.
pub fn tps_kernel_sq(s: f64) -> f64 {
    if s > 0.0 {
        0.5 * s * s.ln()
    } else {
        0.0
    }
}
