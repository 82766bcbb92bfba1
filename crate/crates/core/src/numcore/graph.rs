//! Define-by-run reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape: every op pushes a node whose parents
//! already exist, so push order is a topological order and backward is a
//! single reverse sweep. Graphs are rebuilt per minibatch and never shared
//! across threads.
//!
//! Leaves are either parameters (gradients tracked) or constants. Nodes that
//! do not depend on any parameter are skipped during the backward sweep.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
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
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// matrix `[m×n]` plus a length-`n` row vector
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Sum(usize),
    /// `[m×n] -> [m]`
    RowSum(usize),
    /// `[m×n] -> [n]`
    ColMean(usize),
    Transpose(usize),
    GatherRows(usize, Vec<usize>),
    LogSoftmaxRows(usize),
    RowNormalize(usize, f64),
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => [Some(a), Some(b)],
            Scale(a, _)
            | AddScalar(a)
            | Relu(a)
            | Exp(a)
            | Log(a)
            | Sqrt(a)
            | Sum(a)
            | RowSum(a)
            | ColMean(a)
            | Transpose(a)
            | GatherRows(a, _)
            | LogSoftmaxRows(a)
            | RowNormalize(a, _) => [Some(a), None],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// true when some parameter leaf is an ancestor (or this is one)
    tracked: bool,
    is_param: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every parameter leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a parameter leaf. Unreachable parameters report exact zeros;
    /// constants and interior nodes report `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn push_leaf(&mut self, value: Tensor, is_param: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: is_param,
            is_param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(format!("non-finite output from {name}")));
        }
        let tracked = op
            .parents()
            .iter()
            .flatten()
            .any(|&p| self.nodes[p].tracked);
        self.nodes.push(Node {
            value,
            op,
            tracked,
            is_param: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ── ops ────────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a.0, b.0), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, Op::Sub(a.0, b.0), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with("mul", self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a.0, b.0), "mul")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let av = self.value(a);
        let rv = self.value(row);
        let (m, n) = av.require_matrix("add_row")?;
        if rv.len() != n {
            return Err(Error::Dimension {
                op: "add_row",
                left: av.shape().to_vec(),
                right: rv.shape().to_vec(),
            });
        }
        let mut data = av.data().to_vec();
        for r in data.chunks_mut(n) {
            for (x, &b) in r.iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        self.push(out, Op::AddRow(a.0, row.0), "add_row")
    }

    /// Subtracts a length-`n` vector from every row.
    pub fn sub_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let neg = self.scale(row, -1.0)?;
        self.add_row(a, neg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a.0, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a.0), "add_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(a.0), "relu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a.0), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a.0), "log")
    }

    /// Elementwise square root. The derivative at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v < 0.0) {
            return Err(Error::numeric("sqrt of a negative value"));
        }
        let out = self.value(a).map(f64::sqrt);
        self.push(out, Op::Sqrt(a.0), "sqrt")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a.0), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.require_matrix("row_sum")?;
        let data = (0..m).map(|i| av.data()[i * n..(i + 1) * n].iter().sum()).collect();
        let out = Tensor::vector(data)?;
        self.push(out, Op::RowSum(a.0), "row_sum")
    }

    /// Per-row dot products of two same-shape matrices, `[m×n] -> [m]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let prod = self.mul(a, b)?;
        self.row_sum(prod)
    }

    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.require_matrix("col_mean")?;
        let mut data = vec![0.0; n];
        for r in av.data().chunks(n) {
            for (acc, &v) in data.iter_mut().zip(r) {
                *acc += v;
            }
        }
        for v in &mut data {
            *v /= m as f64;
        }
        let out = Tensor::vector(data)?;
        self.push(out, Op::ColMean(a.0), "col_mean")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose(a.0), "transpose")
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(a).select_rows(idx)?;
        self.push(out, Op::GatherRows(a.0, idx.to_vec()), "gather_rows")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.require_matrix("log_softmax_rows")?;
        let mut data = av.data().to_vec();
        for r in data.chunks_mut(n) {
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + r.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in r.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        self.push(out, Op::LogSoftmaxRows(a.0), "log_softmax_rows")
    }

    /// Scales every row to unit Euclidean norm; rows with norm below `floor`
    /// are divided by `floor` instead.
    pub fn row_normalize(&mut self, a: Var, floor: f64) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.require_matrix("row_normalize")?;
        let mut data = av.data().to_vec();
        for r in data.chunks_mut(n) {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(floor);
            for v in r.iter_mut() {
                *v /= norm;
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        self.push(out, Op::RowNormalize(a.0, floor), "row_normalize")
    }

    // ── backward ───────────────────────────────────────────────────────

    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = &self.nodes[root.0];
        if root_node.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_node.value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
        }

        let mut out = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_param {
                out[i] = Some(
                    grads
                        .get_mut(i)
                        .and_then(Option::take)
                        .unwrap_or_else(|| Tensor::zeros(node.value.shape())),
                );
            }
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[*a].tracked {
                    let ga = g.matmul(&val(*b).transpose()?)?;
                    accumulate(grads, *a, ga)?;
                }
                if self.nodes[*b].tracked {
                    let gb = val(*a).transpose()?.matmul(g)?;
                    accumulate(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, || Ok(g.clone()))?;
                self.send(grads, *b, || Ok(g.clone()))?;
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, || Ok(g.clone()))?;
                self.send(grads, *b, || Ok(g.scale(-1.0)))?;
            }
            Op::Mul(a, b) => {
                self.send(grads, *a, || g.zip_with("mul", val(*b), |x, y| x * y))?;
                self.send(grads, *b, || g.zip_with("mul", val(*a), |x, y| x * y))?;
            }
            Op::AddRow(a, r) => {
                self.send(grads, *a, || Ok(g.clone()))?;
                self.send(grads, *r, || {
                    let n = g.cols();
                    let mut acc = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (s, &v) in acc.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    Tensor::new(val(*r).shape().to_vec(), acc)
                })?;
            }
            Op::Scale(a, c) => self.send(grads, *a, || Ok(g.scale(*c)))?,
            Op::AddScalar(a) => self.send(grads, *a, || Ok(g.clone()))?,
            Op::Relu(a) => self.send(grads, *a, || {
                g.zip_with("relu", val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })
            })?,
            Op::Exp(a) => self.send(grads, *a, || g.zip_with("exp", &node.value, |gv, y| gv * y))?,
            Op::Log(a) => self.send(grads, *a, || g.zip_with("log", val(*a), |gv, x| gv / x))?,
            Op::Sqrt(a) => self.send(grads, *a, || {
                g.zip_with("sqrt", &node.value, |gv, y| if y > 0.0 { 0.5 * gv / y } else { 0.0 })
            })?,
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.send(grads, *a, || Ok(Tensor::full(val(*a).shape(), gv)))?;
            }
            Op::RowSum(a) => self.send(grads, *a, || {
                let (m, n) = val(*a).require_matrix("row_sum")?;
                let mut data = Vec::with_capacity(m * n);
                for &gv in g.data() {
                    data.extend(std::iter::repeat_n(gv, n));
                }
                Tensor::matrix(m, n, data)
            })?,
            Op::ColMean(a) => self.send(grads, *a, || {
                let (m, n) = val(*a).require_matrix("col_mean")?;
                let scaled: Vec<f64> = g.data().iter().map(|v| v / m as f64).collect();
                let mut data = Vec::with_capacity(m * n);
                for _ in 0..m {
                    data.extend_from_slice(&scaled);
                }
                Tensor::matrix(m, n, data)
            })?,
            Op::Transpose(a) => self.send(grads, *a, || g.transpose())?,
            Op::GatherRows(a, idx) => self.send(grads, *a, || {
                let src = val(*a);
                let n = src.cols();
                let mut out = Tensor::zeros(src.shape());
                let data = out.data_mut();
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in data[i * n..(i + 1) * n].iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                Ok(out)
            })?,
            Op::LogSoftmaxRows(a) => self.send(grads, *a, || {
                let y = &node.value;
                let n = y.cols();
                let mut data = g.data().to_vec();
                for (r, (grow, yrow)) in data.chunks_mut(n).zip(y.data().chunks(n)).enumerate() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv -= yv.exp() * gsum;
                    }
                }
                Tensor::new(y.shape().to_vec(), data)
            })?,
            Op::RowNormalize(a, floor) => self.send(grads, *a, || {
                let x = val(*a);
                let y = &node.value;
                let n = x.cols();
                let mut data = vec![0.0; x.len()];
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gr = g.row(r);
                    let out = &mut data[r * n..(r + 1) * n];
                    if norm > *floor {
                        let yr = y.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                            *o = (gv - yv * dot) / norm;
                        }
                    } else {
                        for (o, &gv) in out.iter_mut().zip(gr) {
                            *o = gv / floor;
                        }
                    }
                }
                Tensor::new(x.shape().to_vec(), data)
            })?,
        }
        Ok(())
    }

    fn send(
        &self,
        grads: &mut [Option<Tensor>],
        parent: usize,
        f: impl FnOnce() -> Result<Tensor>,
    ) -> Result<()> {
        if self.nodes[parent].tracked {
            accumulate(grads, parent, f()?)?;
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) -> Result<()> {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(g: &mut Graph, v: f64) -> Var {
        g.param(Tensor::scalar(v))
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let w = scalar_param(&mut g, 3.0);
        let f = g.square(w).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut g = Graph::new();
        let w = scalar_param(&mut g, 3.0);
        let c = g.constant(Tensor::scalar(5.0));
        let f = g.sum(c).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn relu_subgradient_is_zero_at_negative_and_zero() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![-1.0, 2.0, 0.0]).unwrap());
        let r = g.relu(w).unwrap();
        let f = g.sum(r).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_a_contract_error() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let r = g.relu(w).unwrap();
        assert!(matches!(g.backward(r), Err(Error::Contract(_))));
    }

    #[test]
    fn reused_node_accumulates() {
        // f = sum(w*w + w) at w=[1,2] -> grad 2w+1
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let sq = g.square(w).unwrap();
        let s = g.add(sq, w).unwrap();
        let f = g.sum(s).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(0.0));
        assert!(matches!(g.log(w), Err(Error::Numeric(_))));
    }

    #[test]
    fn sqrt_at_zero_has_zero_derivative() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![0.0, 4.0]).unwrap());
        let s = g.sqrt(w).unwrap();
        let f = g.sum(s).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.0, 0.25]);
    }
}
