use std::collections::HashMap;

use crate::error::{AutodiffError, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Lower clamp applied to logarithm arguments.
pub const LN_FLOOR: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    Square(Var),
    Sqrt(Var),
    Relu(Var),
    MinConst(Var, f64),
    MaxConst(Var, f64),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Pad { a: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    SumAxis(Var),
    SumTo(Var),
    BroadcastTo(Var),
    Reshape(Var),
    L2NormRows(Var),
    Softmax(Var, usize),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Sigmoid(a) | Tanh(a) | Ln(a) | Square(a) | Sqrt(a)
            | Relu(a) | MinConst(a, _) | MaxConst(a, _) | Sum(a) | Mean(a) | SumAxis(a)
            | SumTo(a) | BroadcastTo(a) | Reshape(a) | L2NormRows(a) | Softmax(a, _) => vec![*a],
            Slice { a, .. } | Pad { a, .. } => vec![*a],
            Concat { parts, .. } => parts.clone(),
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode differentiation graph.
///
/// Nodes are appended in evaluation order, so node indices are a topological
/// order. Gradients are themselves built from graph operations, which is what
/// makes gradients of gradients available.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients of a scalar with respect to the requires-grad leaves it depends on.
#[derive(Clone, Debug, Default)]
pub struct GradientMap<F> {
    grads: HashMap<Var, Tensor<F>>,
}

impl<F: Real> GradientMap<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(&v)
    }

    pub fn remove(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn contains(&self, v: Var) -> bool {
        self.grads.contains_key(&v)
    }

    /// Gradient for `v`, or zeros of `shape` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<F> {
        self.grads
            .get(&v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node<F> {
        &self.nodes[v.0]
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(AutodiffError::UnknownNode(v.0))
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<F>, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.node(*p).requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(AutodiffError::InvalidShape {
                op,
                shape: s.to_vec(),
                msg: "expected a rank-2 tensor".into(),
            });
        }
        Ok((s[0], s[1]))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(F) -> F) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).map(f);
        Ok(self.push(v, op))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(F, F) -> F,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).zip_broadcast(self.value(b), name, f)?;
        Ok(self.push(v, op))
    }

    // ---- forward operations ----------------------------------------------

    /// `a · b` for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the matching flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).matmul(self.value(b), ta, tb)?;
        Ok(self.push(v, Op::MatMul { a, b, ta, tb }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = F::lit(c);
        self.unary(a, Op::Scale(a, c), |x| x * k)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = F::lit(c);
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    /// `c - a`.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        self.add_scalar(n, c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), |x| F::one() / (F::one() + (-x).exp()))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    /// Natural log with the argument clamped below at [`LN_FLOOR`].
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let floor = F::lit(LN_FLOOR);
        self.unary(a, Op::Ln(a), |x| x.max(floor).ln())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| x.max(F::zero()))
    }

    /// Elementwise `min(a, c)`; the clipped branch carries zero gradient.
    pub fn min_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = F::lit(c);
        self.unary(a, Op::MinConst(a, c), |x| x.min(k))
    }

    /// Elementwise `max(a, c)`; the clipped branch carries zero gradient.
    pub fn max_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = F::lit(c);
        self.unary(a, Op::MaxConst(a, c), |x| x.max(k))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        for p in parts {
            self.check(*p)?;
        }
        let values: Vec<&Tensor<F>> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat(&values, axis)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).slice_axis(axis, start, len)?;
        Ok(self.push(v, Op::Slice { a, axis, start }))
    }

    fn pad(&mut self, a: Var, axis: usize, start: usize, total: usize) -> Result<Var> {
        let v = self.value(a).pad_axis(axis, start, total)?;
        Ok(self.push(v, Op::Pad { a, axis, start }))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = Tensor::scalar(self.value(a).sum_all());
        Ok(self.push(v, Op::Sum(a)))
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        if t.is_empty() {
            return Err(AutodiffError::InvalidShape {
                op: "mean",
                shape: t.shape().to_vec(),
                msg: "empty tensor".into(),
            });
        }
        let v = Tensor::scalar(t.sum_all() / F::lit(t.len() as f64));
        Ok(self.push(v, Op::Mean(a)))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        if axis >= self.value(a).rank() {
            return Err(AutodiffError::InvalidShape {
                op: "sum_axis",
                shape: self.shape(a).to_vec(),
                msg: format!("axis {axis} out of range"),
            });
        }
        let v = self.value(a).sum_axis(axis);
        Ok(self.push(v, Op::SumAxis(a)))
    }

    /// Reduces a broadcast-compatible tensor down to `shape` by summation.
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        if self.shape(a) == shape {
            return Ok(a);
        }
        let v = self.value(a).sum_to(shape)?;
        Ok(self.push(v, Op::SumTo(a)))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        if self.shape(a) == shape {
            return Ok(a);
        }
        let v = self.value(a).broadcast_to(shape)?;
        Ok(self.push(v, Op::BroadcastTo(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        if self.shape(a) == shape {
            return Ok(a);
        }
        let v = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Euclidean norm of each row of a rank-2 tensor, shape (rows, 1).
    pub fn l2_norm_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rank2("l2_norm_rows", a)?;
        let t = self.value(a);
        let data = (0..r)
            .map(|i| t.data()[i * c..(i + 1) * c].iter().map(|x| *x * *x).sum::<F>().sqrt())
            .collect();
        let v = Tensor::new(vec![r, 1], data)?;
        Ok(self.push(v, Op::L2NormRows(a)))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        if axis >= self.value(a).rank() {
            return Err(AutodiffError::InvalidShape {
                op: "softmax",
                shape: self.shape(a).to_vec(),
                msg: format!("axis {axis} out of range"),
            });
        }
        let v = self.value(a).softmax_axis(axis);
        Ok(self.push(v, Op::Softmax(a, axis)))
    }

    // ---- reverse mode ----------------------------------------------------

    /// Exact gradients of a one-element output with respect to every
    /// requires-grad leaf it depends on.
    pub fn backward(&mut self, output: Var) -> Result<GradientMap<F>> {
        self.check(output)?;
        let leaves: Vec<Var> = (0..=output.0)
            .map(Var)
            .filter(|v| {
                let n = self.node(*v);
                n.requires_grad && matches!(n.op, Op::Leaf)
            })
            .collect();
        let adjoints = self.reverse_sweep(output, &leaves)?;
        let grads = leaves
            .iter()
            .zip(adjoints)
            .filter_map(|(leaf, g)| g.map(|g| (*leaf, self.value(g).clone())))
            .collect();
        Ok(GradientMap { grads })
    }

    /// Gradient of `output` with respect to `wrt` as a live node, so it can be
    /// differentiated again.
    pub fn grad_as_node(&mut self, output: Var, wrt: Var) -> Result<Var> {
        Ok(self.grads_as_nodes(output, &[wrt])?[0])
    }

    /// Like [`grad_as_node`](Self::grad_as_node) for several targets in one sweep.
    pub fn grads_as_nodes(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        self.check(output)?;
        let adjoints = self.reverse_sweep(output, wrt)?;
        adjoints
            .into_iter()
            .zip(wrt)
            .map(|(g, w)| g.ok_or(AutodiffError::Unreachable(w.0)))
            .collect()
    }

    fn reverse_sweep(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Option<Var>>> {
        let out_shape = self.shape(output).to_vec();
        if self.value(output).len() != 1 {
            return Err(AutodiffError::NotScalar(out_shape));
        }
        for w in wrt {
            self.check(*w)?;
        }
        let n = output.0 + 1;
        // Nodes lying on a path from some wrt node to the output.
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.0 < n {
                relevant[w.0] = true;
            }
        }
        for i in 0..n {
            if !relevant[i] && self.nodes[i].requires_grad {
                relevant[i] = self.nodes[i].op.parents().iter().any(|p| relevant[p.0]);
            }
        }
        let mut adj: Vec<Option<Var>> = vec![None; n];
        if relevant[output.0] {
            adj[output.0] = Some(self.constant(Tensor::ones(&out_shape)));
        }
        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            for (parent, contrib) in self.vjp(Var(i), &op, g, &relevant)? {
                adj[parent.0] = Some(match adj[parent.0] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| if w.0 < n { adj[w.0] } else { None })
            .collect())
    }

    fn mask(&mut self, a: Var, keep: impl Fn(F) -> bool) -> Var {
        let m = self
            .value(a)
            .map(|x| if keep(x) { F::one() } else { F::zero() });
        self.constant(m)
    }

    /// Vector-Jacobian products of node `y` (produced by `op`) for upstream `g`.
    fn vjp(&mut self, y: Var, op: &Op, g: Var, relevant: &[bool]) -> Result<Vec<(Var, Var)>> {
        let want = |v: &Var| relevant[v.0];
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                if want(&a) {
                    let ga = if ta {
                        self.matmul_t(b, g, tb, true)?
                    } else {
                        self.matmul_t(g, b, false, !tb)?
                    };
                    out.push((a, ga));
                }
                if want(&b) {
                    let gb = if tb {
                        self.matmul_t(g, a, true, ta)?
                    } else {
                        self.matmul_t(a, g, !ta, false)?
                    };
                    out.push((b, gb));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                if want(&a) {
                    let s = self.shape(a).to_vec();
                    out.push((a, self.sum_to(g, &s)?));
                }
                if want(&b) {
                    let s = self.shape(b).to_vec();
                    let gb = if matches!(op, Op::Sub(..)) {
                        self.neg(g)?
                    } else {
                        g
                    };
                    out.push((b, self.sum_to(gb, &s)?));
                }
            }
            Op::Mul(a, b) => {
                if want(&a) {
                    let s = self.shape(a).to_vec();
                    let t = self.mul(g, b)?;
                    out.push((a, self.sum_to(t, &s)?));
                }
                if want(&b) {
                    let s = self.shape(b).to_vec();
                    let t = self.mul(g, a)?;
                    out.push((b, self.sum_to(t, &s)?));
                }
            }
            Op::Div(a, b) => {
                if want(&a) {
                    let s = self.shape(a).to_vec();
                    let t = self.div(g, b)?;
                    out.push((a, self.sum_to(t, &s)?));
                }
                if want(&b) {
                    // d(a/b)/db = -(a/b)/b
                    let s = self.shape(b).to_vec();
                    let q = self.div(y, b)?;
                    let t = self.mul(g, q)?;
                    let t = self.neg(t)?;
                    out.push((b, self.sum_to(t, &s)?));
                }
            }
            Op::Scale(a, c) => out.push((a, self.scale(g, c)?)),
            Op::AddScalar(a) => out.push((a, g)),
            Op::Sigmoid(a) => {
                let one_minus = self.rsub_scalar(1.0, y)?;
                let d = self.mul(y, one_minus)?;
                out.push((a, self.mul(g, d)?));
            }
            Op::Tanh(a) => {
                let sq = self.square(y)?;
                let d = self.rsub_scalar(1.0, sq)?;
                out.push((a, self.mul(g, d)?));
            }
            Op::Ln(a) => {
                let floor = F::lit(LN_FLOOR);
                let m = self.mask(a, |x| x >= floor);
                let clamped = self.max_const(a, LN_FLOOR)?;
                let t = self.mul(g, m)?;
                out.push((a, self.div(t, clamped)?));
            }
            Op::Square(a) => {
                let t = self.mul(g, a)?;
                out.push((a, self.scale(t, 2.0)?));
            }
            Op::Sqrt(a) => {
                let half = self.scale(g, 0.5)?;
                out.push((a, self.div(half, y)?));
            }
            Op::Relu(a) => {
                let m = self.mask(a, |x| x > F::zero());
                out.push((a, self.mul(g, m)?));
            }
            Op::MinConst(a, c) => {
                let k = F::lit(c);
                let m = self.mask(a, |x| x < k);
                out.push((a, self.mul(g, m)?));
            }
            Op::MaxConst(a, c) => {
                let k = F::lit(c);
                let m = self.mask(a, |x| x > k);
                out.push((a, self.mul(g, m)?));
            }
            Op::Concat { ref parts, axis } => {
                let mut start = 0;
                for p in parts {
                    let len = self.shape(*p)[axis];
                    if want(p) {
                        out.push((*p, self.slice(g, axis, start, len)?));
                    }
                    start += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let total = self.shape(a)[axis];
                out.push((a, self.pad(g, axis, start, total)?));
            }
            Op::Pad { a, axis, start } => {
                let len = self.shape(a)[axis];
                out.push((a, self.slice(g, axis, start, len)?));
            }
            Op::Sum(a) => {
                let s = self.shape(a).to_vec();
                out.push((a, self.broadcast_to(g, &s)?));
            }
            Op::Mean(a) => {
                let s = self.shape(a).to_vec();
                let count = self.value(a).len() as f64;
                let b = self.broadcast_to(g, &s)?;
                out.push((a, self.scale(b, 1.0 / count)?));
            }
            Op::SumAxis(a) | Op::SumTo(a) => {
                let s = self.shape(a).to_vec();
                out.push((a, self.broadcast_to(g, &s)?));
            }
            Op::BroadcastTo(a) => {
                let s = self.shape(a).to_vec();
                out.push((a, self.sum_to(g, &s)?));
            }
            Op::Reshape(a) => {
                let s = self.shape(a).to_vec();
                out.push((a, self.reshape(g, &s)?));
            }
            Op::L2NormRows(a) => {
                // g * a / n, with a zero row (n = 0) contributing zero.
                let safe = self.max_const(y, F::min_positive_value().to_f64().unwrap_or(0.0))?;
                let unit = self.div(a, safe)?;
                out.push((a, self.mul(g, unit)?));
            }
            Op::Softmax(a, axis) => {
                let gy = self.mul(g, y)?;
                let s = self.sum_axis(gy, axis)?;
                let centered = self.sub(g, s)?;
                out.push((a, self.mul(y, centered)?));
            }
        }
        Ok(out)
    }
}
