//! Reverse-mode differentiation over a flat list of recorded operations.
//!
//! A [`Tape`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so index order is a topological order and the backward
//! sweep simply walks indices downward, touching each node once. Only nodes
//! that lie on a path from a requested input to the loss receive gradients.

use std::borrow::Cow;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddRow(Var, Var),
    Silu(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    BroadcastRows(Var),
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Silu(a)
            | Op::Square(a)
            | Op::GatherRows(a, _)
            | Op::BroadcastRows(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

/// Recorded computation. Leaves may borrow their tensors, so frozen model
/// weights go on the tape without being copied.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf that borrows its value for the lifetime of the tape.
    pub fn leaf_ref(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        Ok(self.push(value, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let out = self.value(a).scale(s)?;
        Ok(self.push(out, Op::Scale(a, s)))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let (r, c) = self.value(row).dims2()?;
        if r != 1 || c != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: vec![m, n],
                rhs: vec![r, c],
            });
        }
        let bias = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(bias) {
                *x += b;
            }
        }
        let out = Tensor::from_parts_unchecked(vec![m, n], data);
        self.push_checked(out, Op::AddRow(a, row), "add_row")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map("silu", |x| x * sigmoid(x))?;
        Ok(self.push(out, Op::Silu(a)))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map("square", |x| x * x)?;
        Ok(self.push(out, Op::Square(a)))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let rows = self.value(*first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.value(*p).dims2()?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: vec![r, c],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::from_parts_unchecked(vec![rows, total], data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Embedding lookup: row `indices[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.value(table).dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(format!("row index {bad} out of {r}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let out = Tensor::from_parts_unchecked(vec![indices.len(), c], data);
        Ok(self.push(out, Op::GatherRows(table, indices.to_vec())))
    }

    /// Repeats a `1 x n` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if r != 1 {
            return Err(Error::Shape {
                op: "broadcast_rows",
                lhs: vec![r, c],
                rhs: vec![1, c],
            });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(src);
        }
        let out = Tensor::from_parts_unchecked(vec![rows, c], data);
        Ok(self.push(out, Op::BroadcastRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        self.push_checked(Tensor::scalar(s as f32), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s: f64 = v.data().iter().map(|&x| x as f64).sum();
        let m = (s / v.numel().max(1) as f64) as f32;
        self.push_checked(Tensor::scalar(m), Op::Mean(a), "mean")
    }

    /// Mean squared difference, the workhorse loss.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let end = loss.0 + 1;

        let mut feeds_loss = vec![false; end];
        feeds_loss[loss.0] = true;
        for i in (0..end).rev() {
            if feeds_loss[i] {
                for inp in self.nodes[i].op.inputs() {
                    feeds_loss[inp.0] = true;
                }
            }
        }
        for v in wrt {
            if v.0 >= end || !feeds_loss[v.0] {
                return Err(Error::Unreachable(v.0));
            }
        }

        let mut from_wrt = vec![false; end];
        for v in wrt {
            from_wrt[v.0] = true;
        }
        for i in 0..end {
            if !from_wrt[i] && self.nodes[i].op.inputs().iter().any(|p| from_wrt[p.0]) {
                from_wrt[i] = true;
            }
        }
        let needed: Vec<bool> = (0..end).map(|i| feeds_loss[i] && from_wrt[i]).collect();

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; end];
        grads[loss.0] = Some(vec![1.0]);
        let mut results: Vec<Option<Tensor>> = vec![None; wrt.len()];

        for i in (0..end).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (slot, v) in results.iter_mut().zip(wrt) {
                if v.0 == i && slot.is_none() {
                    *slot = Some(Tensor::from_parts_unchecked(
                        self.nodes[i].value.shape().to_vec(),
                        g.clone(),
                    ));
                }
            }
            self.propagate(i, &g, &needed, &mut grads)?;
        }

        let out = results
            .into_iter()
            .zip(wrt)
            .map(|(g, v)| g.unwrap_or_else(|| Tensor::zeros(self.value(*v).shape())))
            .collect::<Vec<_>>();
        for g in &out {
            g.ensure_finite("backward")?;
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f32], needed: &[bool], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let mut send = |v: Var, contrib: Vec<f32>| {
            if !needed[v.0] {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contrib) {
                        *a += c;
                    }
                }
                slot => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.1;
                if needed[a.0] {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm_nt(g, val(*b), m, n, k, &mut ga);
                    send(*a, ga);
                }
                if needed[b.0] {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm_tn(val(*a), g, m, k, n, &mut gb);
                    send(*b, gb);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                if needed[a.0] {
                    send(*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if needed[b.0] {
                    send(*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|x| x * s).collect()),
            Op::AddRow(a, row) => {
                send(*a, g.to_vec());
                if needed[row.0] {
                    let n = self.value(*row).numel();
                    let mut acc = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        for (s, x) in acc.iter_mut().zip(chunk) {
                            *s += x;
                        }
                    }
                    send(*row, acc);
                }
            }
            Op::Silu(a) => send(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(gi, &x)| {
                        let s = sigmoid(x);
                        gi * s * (1.0 + x * (1.0 - s))
                    })
                    .collect(),
            ),
            Op::Square(a) => send(*a, g.iter().zip(val(*a)).map(|(gi, x)| 2.0 * x * gi).collect()),
            Op::ConcatCols(parts) => {
                let rows = self.nodes[i].value.dims2()?.0;
                let total = self.nodes[i].value.dims2()?.1;
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).dims2()?.1;
                    if needed[p.0] {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        send(*p, gp);
                    }
                    offset += w;
                }
            }
            Op::GatherRows(table, idx) => {
                let c = self.value(*table).dims2()?.1;
                let mut gt = vec![0.0; self.value(*table).numel()];
                for (r, &src) in idx.iter().enumerate() {
                    kernels::axpy(1.0, &g[r * c..(r + 1) * c], &mut gt[src * c..(src + 1) * c]);
                }
                send(*table, gt);
            }
            Op::BroadcastRows(a) => {
                let n = self.value(*a).numel();
                let mut acc = vec![0.0; n];
                for chunk in g.chunks(n) {
                    kernels::axpy(1.0, chunk, &mut acc);
                }
                send(*a, acc);
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel().max(1);
                send(*a, vec![g[0] / n as f32; n]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y, &[x]).unwrap();
        assert_eq!(g[0].data(), &[6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, -2.0, 0.5]).unwrap());
        let killed = tape.scale(x, 0.0).unwrap();
        let s = tape.sum(killed).unwrap();
        let c = tape.leaf(Tensor::scalar(4.0));
        let loss = tape.add(s, c).unwrap();
        let g = tape.backward(loss, &[x]).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unreachable_and_non_scalar_are_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0]).unwrap());
        let unrelated = tape.leaf(Tensor::scalar(1.0));
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        assert!(matches!(tape.backward(loss, &[unrelated]), Err(Error::Unreachable(_))));
        assert!(matches!(tape.backward(sq, &[x]), Err(Error::Invalid(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x * x + 3x) -> grad 2x + 3
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, -1.0]).unwrap());
        let xx = tape.mul(x, x).unwrap();
        let x3 = tape.scale(x, 3.0).unwrap();
        let s = tape.add(xx, x3).unwrap();
        let loss = tape.sum(s).unwrap();
        let g = tape.backward(loss, &[x]).unwrap();
        assert_eq!(g[0].data(), &[5.0, 1.0]);
    }

    #[test]
    fn gather_scatters_back() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let rows = tape.gather_rows(table, &[1, 1, 0]).unwrap();
        let loss = tape.sum(rows).unwrap();
        let g = tape.backward(loss, &[table]).unwrap();
        assert_eq!(g[0].data(), &[1.0, 1.0, 2.0, 2.0]);
        assert!(tape.gather_rows(table, &[2]).is_err());
    }
}
