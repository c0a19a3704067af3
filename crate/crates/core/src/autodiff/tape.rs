use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Differentiable operations. Axes index rank-2 tensors (0 = rows, 1 = columns).
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Multiply,
    Subtract,
    Exp,
    Ln,
    Relu,
    Elu { alpha: f64 },
    Tanh,
    SoftmaxRows,
    LogSumExpRows,
    ReduceMean,
    ReduceSum,
    Slice { axis: usize, start: usize, end: usize },
    Concat { axis: usize },
    Broadcast { shape: Vec<usize> },
    Scale(f64),
    Powf(f64),
    Reshape { shape: Vec<usize> },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Multiply => "multiply",
            OpKind::Subtract => "subtract",
            OpKind::Exp => "exp",
            OpKind::Ln => "ln",
            OpKind::Relu => "relu",
            OpKind::Elu { .. } => "elu",
            OpKind::Tanh => "tanh",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LogSumExpRows => "log_sum_exp_rows",
            OpKind::ReduceMean => "reduce_mean",
            OpKind::ReduceSum => "reduce_sum",
            OpKind::Slice { .. } => "slice",
            OpKind::Concat { .. } => "concat",
            OpKind::Broadcast { .. } => "broadcast",
            OpKind::Scale(_) => "scale",
            OpKind::Powf(_) => "powf",
            OpKind::Reshape { .. } => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Option<OpKind>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Define-by-run recording of a computation. Build a fresh tape per pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one optional gradient per recorded node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` was not reached.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn rank2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
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

    /// Records a constant: no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None, vec![], false)
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, None, vec![], true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Option<OpKind>, inputs: Vec<usize>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, inputs, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(&self, kind: &OpKind, inputs: &[Var]) -> Error {
        Error::Shape {
            op: kind.name(),
            shapes: inputs.iter().map(|v| self.value(*v).shape().to_vec()).collect(),
        }
    }

    /// Applies `kind` to `inputs` and records the result.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::MatMul | OpKind::Add | OpKind::Multiply | OpKind::Subtract => Some(2),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        };
        if let Some(a) = arity {
            if inputs.len() != a {
                return Err(self.shape_err(&kind, inputs));
            }
        } else if inputs.is_empty() {
            return Err(self.shape_err(&kind, inputs));
        }
        let value = self.eval(&kind, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let ids = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(value, Some(kind), ids, requires_grad))
    }

    fn eval(&self, kind: &OpKind, inputs: &[Var]) -> Result<Tensor> {
        let x = self.value(inputs[0]);
        let err = || self.shape_err(kind, inputs);
        let out = match kind {
            OpKind::MatMul => {
                let b = self.value(inputs[1]);
                if x.shape().len() != 2 || b.shape().len() != 2 || x.cols() != b.rows() {
                    return Err(err());
                }
                let (m, k, n) = (x.rows(), x.cols(), b.cols());
                let mut out = vec![0.0; m * n];
                matmul_into(x.data(), b.data(), &mut out, m, k, n);
                Tensor::matrix(m, n, out)?
            }
            OpKind::Add | OpKind::Multiply | OpKind::Subtract => {
                let b = self.value(inputs[1]);
                if x.shape() != b.shape() {
                    return Err(err());
                }
                let f: fn(f64, f64) -> f64 = match kind {
                    OpKind::Add => |a, b| a + b,
                    OpKind::Subtract => |a, b| a - b,
                    _ => |a, b| a * b,
                };
                let data = x.data().iter().zip(b.data()).map(|(&a, &b)| f(a, b)).collect();
                Tensor::new(x.shape().to_vec(), data)?
            }
            OpKind::Exp => x.map(f64::exp),
            OpKind::Ln => x.map(f64::ln),
            OpKind::Relu => x.map(|v| v.max(0.0)),
            OpKind::Elu { alpha } => {
                let a = *alpha;
                x.map(|v| if v > 0.0 { v } else { a * v.exp_m1() })
            }
            OpKind::Tanh => x.map(f64::tanh),
            OpKind::SoftmaxRows => {
                let (r, c) = rank2(x);
                let mut out = x.data().to_vec();
                for row in out.chunks_mut(c) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                debug_assert_eq!(out.len(), r * c);
                Tensor::new(x.shape().to_vec(), out)?
            }
            OpKind::LogSumExpRows => {
                let (r, c) = rank2(x);
                let out = x.data().chunks(c).map(log_sum_exp).collect();
                let shape = if x.shape().len() == 1 { vec![1] } else { vec![r, 1] };
                Tensor::new(shape, out)?
            }
            OpKind::ReduceSum => Tensor::scalar(x.sum()),
            OpKind::ReduceMean => Tensor::scalar(x.sum() / x.numel() as f64),
            OpKind::Slice { axis, start, end } => {
                let (r, c) = rank2(x);
                let (start, end) = (*start, *end);
                if x.shape().len() != 2 || start >= end {
                    return Err(err());
                }
                match axis {
                    0 if end <= r => x.row_range(start, end),
                    1 if end <= c => {
                        let w = end - start;
                        let mut out = Vec::with_capacity(r * w);
                        for i in 0..r {
                            out.extend_from_slice(&x.row(i)[start..end]);
                        }
                        Tensor::matrix(r, w, out)?
                    }
                    _ => return Err(err()),
                }
            }
            OpKind::Concat { axis } => {
                let parts: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                if parts.iter().any(|t| t.shape().len() != 2) {
                    return Err(err());
                }
                match axis {
                    0 => {
                        let c = x.cols();
                        if parts.iter().any(|t| t.cols() != c) {
                            return Err(err());
                        }
                        let rows = parts.iter().map(|t| t.rows()).sum();
                        let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
                        Tensor::matrix(rows, c, data)?
                    }
                    1 => {
                        let r = x.rows();
                        if parts.iter().any(|t| t.rows() != r) {
                            return Err(err());
                        }
                        let cols: usize = parts.iter().map(|t| t.cols()).sum();
                        let mut data = Vec::with_capacity(r * cols);
                        for i in 0..r {
                            for t in &parts {
                                data.extend_from_slice(t.row(i));
                            }
                        }
                        Tensor::matrix(r, cols, data)?
                    }
                    _ => return Err(err()),
                }
            }
            OpKind::Broadcast { shape } => {
                if x.numel() == 1 {
                    Tensor::new(shape.clone(), vec![x.item(); shape.iter().product()])?
                } else {
                    let (r, c) = rank2(x);
                    if shape.len() != 2 || !(r == 1 || r == shape[0]) || !(c == 1 || c == shape[1]) {
                        return Err(err());
                    }
                    let (rr, cc) = (shape[0], shape[1]);
                    let mut out = Vec::with_capacity(rr * cc);
                    for i in 0..rr {
                        let src = x.row(if r == 1 { 0 } else { i });
                        if c == 1 {
                            out.extend(std::iter::repeat_n(src[0], cc));
                        } else {
                            out.extend_from_slice(src);
                        }
                    }
                    Tensor::matrix(rr, cc, out)?
                }
            }
            OpKind::Scale(s) => {
                let s = *s;
                x.map(|v| v * s)
            }
            OpKind::Powf(p) => {
                let p = *p;
                x.map(|v| v.powf(p))
            }
            OpKind::Reshape { shape } => x.reshape(shape).map_err(|_| err())?,
        };
        Ok(out)
    }

    /// Reverse-mode sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, op, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, op: &OpKind, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let ins = &node.inputs;
        let y = node.value.data();
        let val = |i: usize| self.nodes[ins[i]].value.data();
        let wants = |i: usize| self.nodes[ins[i]].requires_grad;

        // Accumulates `f(j)` into the gradient buffer of input `i`.
        let acc = |i: usize, grads: &mut [Option<Vec<f64>>], f: &dyn Fn(&mut [f64])| {
            if !wants(i) {
                return;
            }
            let n = self.nodes[ins[i]].value.numel();
            let buf = grads[ins[i]].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };

        match op {
            OpKind::MatMul => {
                let a = &self.nodes[ins[0]].value;
                let b = &self.nodes[ins[1]].value;
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                acc(0, grads, &|buf| matmul_bt_into(g, b.data(), buf, m, k, n));
                acc(1, grads, &|buf| matmul_at_into(a.data(), g, buf, m, k, n));
            }
            OpKind::Add => {
                acc(0, grads, &|buf| add_into(buf, g));
                acc(1, grads, &|buf| add_into(buf, g));
            }
            OpKind::Subtract => {
                acc(0, grads, &|buf| add_into(buf, g));
                acc(1, grads, &|buf| buf.iter_mut().zip(g).for_each(|(b, gv)| *b -= gv));
            }
            OpKind::Multiply => {
                let (a, b) = (val(0), val(1));
                acc(0, grads, &|buf| zip3(buf, g, b, |gv, bv| gv * bv));
                acc(1, grads, &|buf| zip3(buf, g, a, |gv, av| gv * av));
            }
            OpKind::Exp => acc(0, grads, &|buf| zip3(buf, g, y, |gv, yv| gv * yv)),
            OpKind::Ln => {
                let x = val(0);
                acc(0, grads, &|buf| zip3(buf, g, x, |gv, xv| gv / xv));
            }
            OpKind::Relu => {
                let x = val(0);
                acc(0, grads, &|buf| zip3(buf, g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            OpKind::Elu { alpha } => {
                let x = val(0);
                let a = *alpha;
                acc(0, grads, &|buf| {
                    for ((b, &gv), (&xv, &yv)) in buf.iter_mut().zip(g).zip(x.iter().zip(y)) {
                        *b += if xv > 0.0 { gv } else { gv * (yv + a) };
                    }
                });
            }
            OpKind::Tanh => acc(0, grads, &|buf| zip3(buf, g, y, |gv, yv| gv * (1.0 - yv * yv))),
            OpKind::SoftmaxRows => {
                let c = node.value.cols();
                acc(0, grads, &|buf| {
                    for ((b, gr), yr) in buf.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((bv, &gv), &yv) in b.iter_mut().zip(gr).zip(yr) {
                            *bv += yv * (gv - dot);
                        }
                    }
                });
            }
            OpKind::LogSumExpRows => {
                let x = val(0);
                let c = self.nodes[ins[0]].value.cols();
                acc(0, grads, &|buf| {
                    for (r, (b, xr)) in buf.chunks_mut(c).zip(x.chunks(c)).enumerate() {
                        for (bv, &xv) in b.iter_mut().zip(xr) {
                            *bv += g[r] * (xv - y[r]).exp();
                        }
                    }
                });
            }
            OpKind::ReduceSum => acc(0, grads, &|buf| buf.iter_mut().for_each(|b| *b += g[0])),
            OpKind::ReduceMean => {
                let n = val(0).len() as f64;
                acc(0, grads, &|buf| buf.iter_mut().for_each(|b| *b += g[0] / n));
            }
            OpKind::Slice { axis, start, end } => {
                let c = self.nodes[ins[0]].value.cols();
                let (start, end) = (*start, *end);
                acc(0, grads, &|buf| {
                    if *axis == 0 {
                        add_into(&mut buf[start * c..end * c], g);
                    } else {
                        let w = end - start;
                        for (row, gr) in buf.chunks_mut(c).zip(g.chunks(w)) {
                            add_into(&mut row[start..end], gr);
                        }
                    }
                });
            }
            OpKind::Concat { axis } => {
                let total_cols = node.value.cols();
                let mut offset = 0;
                for i in 0..ins.len() {
                    let part = &self.nodes[ins[i]].value;
                    let (pr, pc) = (part.rows(), part.cols());
                    if *axis == 0 {
                        let seg = &g[offset * pc..(offset + pr) * pc];
                        acc(i, grads, &|buf| add_into(buf, seg));
                        offset += pr;
                    } else {
                        let off = offset;
                        acc(i, grads, &|buf| {
                            for (r, row) in buf.chunks_mut(pc).enumerate() {
                                add_into(row, &g[r * total_cols + off..r * total_cols + off + pc]);
                            }
                        });
                        offset += pc;
                    }
                }
            }
            OpKind::Broadcast { .. } => {
                let x = &self.nodes[ins[0]].value;
                let (r, c) = (x.rows(), x.cols());
                let cc = node.value.cols();
                acc(0, grads, &|buf| {
                    if x.numel() == 1 {
                        buf[0] += g.iter().sum::<f64>();
                        return;
                    }
                    for (i, gr) in g.chunks(cc).enumerate() {
                        let dst = if r == 1 { 0 } else { i };
                        for (j, &gv) in gr.iter().enumerate() {
                            buf[dst * c + if c == 1 { 0 } else { j }] += gv;
                        }
                    }
                });
            }
            OpKind::Scale(s) => acc(0, grads, &|buf| buf.iter_mut().zip(g).for_each(|(b, gv)| *b += s * gv)),
            OpKind::Powf(p) => {
                let x = val(0);
                let p = *p;
                acc(0, grads, &|buf| zip3(buf, g, x, |gv, xv| gv * p * xv.powf(p - 1.0)));
            }
            OpKind::Reshape { .. } => acc(0, grads, &|buf| add_into(buf, g)),
        }
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    for (b, gv) in buf.iter_mut().zip(g) {
        *b += gv;
    }
}

fn zip3(buf: &mut [f64], g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((b, &gv), &ov) in buf.iter_mut().zip(g).zip(other) {
        *b += f(gv, ov);
    }
}

/// Overflow-safe `ln Σ exp(x_i)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

// Named helpers; thin wrappers over `forward_op`.
impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Subtract, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Multiply, &[a, b])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Exp, &[a])
    }
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Ln, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Relu, &[a])
    }
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Elu { alpha: 1.0 }, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Tanh, &[a])
    }
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::SoftmaxRows, &[a])
    }
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::LogSumExpRows, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::ReduceSum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::ReduceMean, &[a])
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.forward_op(OpKind::Slice { axis, start, end }, &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.forward_op(OpKind::Concat { axis }, parts)
    }
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.forward_op(OpKind::Broadcast { shape: shape.to_vec() }, &[a])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.forward_op(OpKind::Scale(s), &[a])
    }
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.forward_op(OpKind::Powf(p), &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.forward_op(OpKind::Reshape { shape: shape.to_vec() }, &[a])
    }

    /// Row-wise `log softmax`, computed as `x − lse(x)`.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let lse = self.log_sum_exp_rows(a)?;
        let lse = self.broadcast(lse, &shape)?;
        self.sub(a, lse)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = tape.constant(Tensor::identity(2));
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[&[0.0; 4]]));
        let s = tape.softmax_rows(a).unwrap();
        assert_eq!(tape.value(s).data(), &[0.25; 4]);
    }

    #[test]
    fn log_sum_exp_is_overflow_safe() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap());
        let l = tape.log_sum_exp_rows(a).unwrap();
        let v = tape.value(l).item();
        assert!((v - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-9, "{v}");
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            Error::Shape { op, shapes } => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, 9.0]]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn mean_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let m = tape.mean(sq).unwrap();
        let g = tape.backward(m).unwrap();
        let want = [2.0 / 3.0, 4.0 / 3.0, 2.0];
        for (a, b) in g.get(x).unwrap().data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn diamond_accumulates() {
        // y = x·x + 3x feeds the same leaf through two paths.
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let a = tape.mul(x, x).unwrap();
        let b = tape.scale(x, 3.0).unwrap();
        let y = tape.add(a, b).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn repeated_backward_is_deterministic() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7]]).unwrap());
        let e = tape.elu(x).unwrap();
        let s = tape.softmax_rows(e).unwrap();
        let l = tape.ln(s).unwrap();
        let r = tape.sum(l).unwrap();
        let g1 = tape.backward(r).unwrap().get(x).unwrap().clone();
        let g2 = tape.backward(r).unwrap().get(x).unwrap().clone();
        assert_eq!(g1, g2);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(4.0));
        let x = tape.param(Tensor::scalar(1.5));
        let y = tape.mul(c, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item(), 4.0);
    }

    #[test]
    fn broadcast_row_and_scalar() {
        let mut tape = Tape::new();
        let b = tape.param(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let s = tape.param(Tensor::scalar(3.0));
        let bb = tape.broadcast(b, &[3, 2]).unwrap();
        let ss = tape.broadcast(s, &[3, 2]).unwrap();
        assert_eq!(tape.value(bb).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let p = tape.mul(bb, ss).unwrap();
        let r = tape.sum(p).unwrap();
        let g = tape.backward(r).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[9.0, 9.0]);
        assert_eq!(g.get(s).unwrap().item(), 9.0);
        assert!(tape.broadcast(b, &[3, 3]).is_err());
    }
}
