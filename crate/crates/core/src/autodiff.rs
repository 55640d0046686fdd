//! Reverse-mode automatic differentiation on dense tensors.
//!
//! A [`Tape`] records every primitive as a node holding its operands and
//! forward value; [`Tape::backward`] walks the nodes in reverse creation
//! order (already topological) and accumulates adjoints, summing over
//! multiple uses. The tape is rebuilt per forward pass — the networks here
//! are small enough that graph caching would buy nothing.
//!
//! Gradient accumulation order is fixed by node order, so identical inputs
//! produce bit-identical gradients.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    /// `[m,n] + [n]`, the bias pattern.
    AddRow(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherCols(Var, Vec<usize>),
    /// Assemble `[m, width]` from two column sets at disjoint positions.
    InterleaveCols {
        a: Var,
        b: Var,
        idx_a: Vec<usize>,
        idx_b: Vec<usize>,
    },
    Reshape(Var),
    Bmm(Var, Var),
    TransposeLast(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    Recip(Var),
    SoftmaxLast(Var),
    SumAll(Var),
    MeanAll(Var),
    /// `[m,n] → [m,1]` row-wise Euclidean norms.
    RowNorms(Var),
    /// `[m,n] ⊙ [m,1]` column broadcast.
    MulCol(Var, Var),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Dynamic computation tape.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Insert a leaf. Gradients are only tracked through subgraphs rooted at
    /// leaves with `needs_grad`.
    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.push(Op::Leaf, value, needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), value, ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(Op::AddScalar(a), value, ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul_nn(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, ng))
    }

    /// Add a rank-1 bias `[n]` to every row of `[m,n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(bias);
        if av.rank() != 2 || bv.rank() != 1 || av.cols2() != bv.shape()[0] {
            return Err(Error::ShapeMismatch(format!(
                "add_row on {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let n = av.cols2();
        let mut out = av.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % n];
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(Op::AddRow(a, bias), out, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of nothing".into()));
        }
        let m = self.value(parts[0]).rows2();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.rows2() != m {
                return Err(Error::ShapeMismatch(format!(
                    "concat_cols row mismatch: {:?}",
                    v.shape()
                )));
            }
            total += v.cols2();
        }
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            let n = v.cols2();
            for i in 0..m {
                out[i * total + offset..i * total + offset + n]
                    .copy_from_slice(&v.data()[i * n..(i + 1) * n]);
            }
            offset += n;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::new(vec![m, total], out)?,
            ng,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 || start >= end || end > v.cols2() {
            return Err(Error::ShapeMismatch(format!(
                "slice_cols {start}..{end} of {:?}",
                v.shape()
            )));
        }
        let (m, n) = (v.rows2(), v.cols2());
        let w = end - start;
        let mut out = vec![0.0; m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&v.data()[i * n + start..i * n + end]);
        }
        let ng = self.needs(a);
        Ok(self.push(Op::SliceCols(a, start, end), Tensor::new(vec![m, w], out)?, ng))
    }

    pub fn gather_cols(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 || indices.iter().any(|&i| i >= v.cols2()) {
            return Err(Error::ShapeMismatch(format!(
                "gather_cols {indices:?} of {:?}",
                v.shape()
            )));
        }
        let (m, n) = (v.rows2(), v.cols2());
        let w = indices.len();
        let mut out = vec![0.0; m * w];
        for i in 0..m {
            for (j, &idx) in indices.iter().enumerate() {
                out[i * w + j] = v.data()[i * n + idx];
            }
        }
        let ng = self.needs(a);
        Ok(self.push(
            Op::GatherCols(a, indices.to_vec()),
            Tensor::new(vec![m, w], out)?,
            ng,
        ))
    }

    /// Place the columns of `a` at `idx_a` and the columns of `b` at `idx_b`.
    /// The index sets must be disjoint and cover `0..idx_a.len()+idx_b.len()`.
    pub fn interleave_cols(
        &mut self,
        a: Var,
        b: Var,
        idx_a: &[usize],
        idx_b: &[usize],
    ) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let width = idx_a.len() + idx_b.len();
        if va.rank() != 2
            || vb.rank() != 2
            || va.rows2() != vb.rows2()
            || va.cols2() != idx_a.len()
            || vb.cols2() != idx_b.len()
        {
            return Err(Error::ShapeMismatch(format!(
                "interleave_cols {:?}/{:?} with {}+{} indices",
                va.shape(),
                vb.shape(),
                idx_a.len(),
                idx_b.len()
            )));
        }
        let mut seen = vec![false; width];
        for &i in idx_a.iter().chain(idx_b.iter()) {
            if i >= width || seen[i] {
                return Err(Error::InvalidArgument(
                    "interleave_cols indices must be a disjoint cover".into(),
                ));
            }
            seen[i] = true;
        }
        let m = va.rows2();
        let mut out = vec![0.0; m * width];
        for i in 0..m {
            for (j, &idx) in idx_a.iter().enumerate() {
                out[i * width + idx] = va.data()[i * idx_a.len() + j];
            }
            for (j, &idx) in idx_b.iter().enumerate() {
                out[i * width + idx] = vb.data()[i * idx_b.len() + j];
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            Op::InterleaveCols {
                a,
                b,
                idx_a: idx_a.to_vec(),
                idx_b: idx_b.to_vec(),
            },
            Tensor::new(vec![m, width], out)?,
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Reshape(a), value, ng))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::bmm(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Bmm(a, b), value, ng))
    }

    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let value = tensor::transpose_last2(self.value(a))?;
        let ng = self.needs(a);
        Ok(self.push(Op::TransposeLast(a), value, ng))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(Op::Tanh(a), value, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(Op::Relu(a), value, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let ng = self.needs(a);
        self.push(Op::Exp(a), value, ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        let ng = self.needs(a);
        self.push(Op::Sqrt(a), value, ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let ng = self.needs(a);
        self.push(Op::Square(a), value, ng)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / x);
        let ng = self.needs(a);
        self.push(Op::Recip(a), value, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() < 1 {
            return Err(Error::ShapeMismatch("softmax on rank-0".into()));
        }
        let n = *v.shape().last().unwrap();
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Op::SoftmaxLast(a), out, ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Op::SumAll(a), Tensor::scalar(s), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum();
        let n = v.numel() as f64;
        let ng = self.needs(a);
        self.push(Op::MeanAll(a), Tensor::scalar(s / n), ng)
    }

    /// Row-wise L2 norms, `[m,n] → [m,1]`.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "row_norms wants 2-d, got {:?}",
                v.shape()
            )));
        }
        let (m, n) = (v.rows2(), v.cols2());
        let mut out = vec![0.0; m];
        for i in 0..m {
            out[i] = v.data()[i * n..(i + 1) * n]
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
        }
        let ng = self.needs(a);
        Ok(self.push(Op::RowNorms(a), Tensor::new(vec![m, 1], out)?, ng))
    }

    /// Broadcast multiply `[m,n] ⊙ [m,1]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let va = self.value(a);
        let vc = self.value(col);
        if va.rank() != 2 || vc.rank() != 2 || vc.cols2() != 1 || va.rows2() != vc.rows2() {
            return Err(Error::ShapeMismatch(format!(
                "mul_col on {:?} vs {:?}",
                va.shape(),
                vc.shape()
            )));
        }
        let (m, n) = (va.rows2(), va.cols2());
        let mut out = va.clone();
        for i in 0..m {
            let c = vc.data()[i];
            for v in &mut out.data_mut()[i * n..(i + 1) * n] {
                *v *= c;
            }
        }
        let ng = self.needs(a) || self.needs(col);
        Ok(self.push(Op::MulCol(a, col), out, ng))
    }

    /// Reverse pass from a scalar-valued root. Returns the adjoints of every
    /// gradient-tracked node; multiple uses of a node sum.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads)?;
            // only leaf adjoints stay retrievable; intermediates are freed
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, tensor::matmul_nt(g, self.value(*b))?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, tensor::matmul_tn(self.value(*a), g)?);
                }
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*bias) {
                    let n = self.value(*bias).shape()[0];
                    let mut db = vec![0.0; n];
                    for (i, v) in g.data().iter().enumerate() {
                        db[i % n] += v;
                    }
                    self.accumulate(grads, *bias, Tensor::new(vec![n], db)?);
                }
            }
            Op::ConcatCols(parts) => {
                let m = g.rows2();
                let total = g.cols2();
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).cols2();
                    if self.needs(p) {
                        let mut dp = vec![0.0; m * n];
                        for i in 0..m {
                            dp[i * n..(i + 1) * n].copy_from_slice(
                                &g.data()[i * total + offset..i * total + offset + n],
                            );
                        }
                        self.accumulate(grads, p, Tensor::new(vec![m, n], dp)?);
                    }
                    offset += n;
                }
            }
            Op::SliceCols(a, start, _end) => {
                let v = self.value(*a);
                let (m, n) = (v.rows2(), v.cols2());
                let w = g.cols2();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + start + w]
                        .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *a, Tensor::new(vec![m, n], da)?);
            }
            Op::GatherCols(a, indices) => {
                let v = self.value(*a);
                let (m, n) = (v.rows2(), v.cols2());
                let w = indices.len();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for (j, &idx) in indices.iter().enumerate() {
                        da[i * n + idx] += g.data()[i * w + j];
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![m, n], da)?);
            }
            Op::InterleaveCols { a, b, idx_a, idx_b } => {
                let m = g.rows2();
                let width = g.cols2();
                if self.needs(*a) {
                    let w = idx_a.len();
                    let mut da = vec![0.0; m * w];
                    for i in 0..m {
                        for (j, &idx) in idx_a.iter().enumerate() {
                            da[i * w + j] = g.data()[i * width + idx];
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(vec![m, w], da)?);
                }
                if self.needs(*b) {
                    let w = idx_b.len();
                    let mut db = vec![0.0; m * w];
                    for i in 0..m {
                        for (j, &idx) in idx_b.iter().enumerate() {
                            db[i * w + j] = g.data()[i * width + idx];
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![m, w], db)?);
                }
            }
            Op::Reshape(a) => {
                let da = g.reshaped(self.value(*a).shape().to_vec())?;
                self.accumulate(grads, *a, da);
            }
            Op::Bmm(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = vb.shape()[2];
                if self.needs(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for bi in 0..bs {
                        let gb = &g.data()[bi * m * n..(bi + 1) * m * n];
                        let bb = &vb.data()[bi * k * n..(bi + 1) * k * n];
                        let dab = &mut da[bi * m * k..(bi + 1) * m * k];
                        for i in 0..m {
                            for l in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += gb[i * n + j] * bb[l * n + j];
                                }
                                dab[i * k + l] = acc;
                            }
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(vec![bs, m, k], da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for bi in 0..bs {
                        let gb = &g.data()[bi * m * n..(bi + 1) * m * n];
                        let ab = &va.data()[bi * m * k..(bi + 1) * m * k];
                        let dbb = &mut db[bi * k * n..(bi + 1) * k * n];
                        for l in 0..k {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for i in 0..m {
                                    acc += ab[i * k + l] * gb[i * n + j];
                                }
                                dbb[l * n + j] = acc;
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![bs, k, n], db)?);
                }
            }
            Op::TransposeLast(a) => {
                self.accumulate(grads, *a, tensor::transpose_last2(g)?);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                self.accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv))?);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })?,
                );
            }
            Op::Exp(a) => {
                let y = &self.nodes[id].value;
                self.accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * yv)?);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[id].value;
                self.accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * 0.5 / yv)?);
            }
            Op::Square(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(x, |gv, xv| gv * 2.0 * xv)?);
            }
            Op::Recip(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(x, |gv, xv| -gv / (xv * xv))?);
            }
            Op::SoftmaxLast(a) => {
                let y = &self.nodes[id].value;
                let n = *y.shape().last().unwrap();
                let mut da = y.clone();
                {
                    let rows = da.numel() / n;
                    let dd = da.data_mut();
                    for row_idx in 0..rows {
                        let base = row_idx * n;
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g.data()[base + j] * y.data()[base + j];
                        }
                        for j in 0..n {
                            dd[base + j] = y.data()[base + j] * (g.data()[base + j] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::SumAll(a) => {
                let gx = g.item()?;
                let shape = self.value(*a).shape().to_vec();
                let numel: usize = shape.iter().product();
                self.accumulate(grads, *a, Tensor::new(shape, vec![gx; numel])?);
            }
            Op::MeanAll(a) => {
                let shape = self.value(*a).shape().to_vec();
                let numel: usize = shape.iter().product();
                let gx = g.item()? / numel as f64;
                self.accumulate(grads, *a, Tensor::new(shape, vec![gx; numel])?);
            }
            Op::RowNorms(a) => {
                let x = self.value(*a);
                let (m, n) = (x.rows2(), x.cols2());
                let y = &self.nodes[id].value;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let norm = y.data()[i];
                    if norm > 0.0 {
                        let gi = g.data()[i] / norm;
                        for j in 0..n {
                            da[i * n + j] = gi * x.data()[i * n + j];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![m, n], da)?);
            }
            Op::MulCol(a, col) => {
                let va = self.value(*a);
                let vc = self.value(*col);
                let (m, n) = (va.rows2(), va.cols2());
                if self.needs(*a) {
                    let mut da = g.clone();
                    for i in 0..m {
                        let c = vc.data()[i];
                        for v in &mut da.data_mut()[i * n..(i + 1) * n] {
                            *v *= c;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*col) {
                    let mut dc = vec![0.0; m];
                    for i in 0..m {
                        for j in 0..n {
                            dc[i] += g.data()[i * n + j] * va.data()[i * n + j];
                        }
                    }
                    self.accumulate(grads, *col, Tensor::new(vec![m, 1], dc)?);
                }
            }
        }
        Ok(())
    }
}

/// Row-wise cross product of two `[m,3]` operands, built from column slices.
pub fn cross3_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let ax = tape.slice_cols(a, 0, 1)?;
    let ay = tape.slice_cols(a, 1, 2)?;
    let az = tape.slice_cols(a, 2, 3)?;
    let bx = tape.slice_cols(b, 0, 1)?;
    let by = tape.slice_cols(b, 1, 2)?;
    let bz = tape.slice_cols(b, 2, 3)?;
    let aybz = tape.mul(ay, bz)?;
    let azby = tape.mul(az, by)?;
    let cx = tape.sub(aybz, azby)?;
    let azbx = tape.mul(az, bx)?;
    let axbz = tape.mul(ax, bz)?;
    let cy = tape.sub(azbx, axbz)?;
    let axby = tape.mul(ax, by)?;
    let aybx = tape.mul(ay, bx)?;
    let cz = tape.sub(axby, aybx)?;
    tape.concat_cols(&[cx, cy, cz])
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Worst-case comparison of analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub worst_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.worst_relative_error < tolerance
    }
}

/// Compare the tape gradient of `build` against central finite differences
/// for every element of every named parameter.
///
/// `build` must be deterministic: it receives a fresh tape and leaf vars in
/// the order of `params` and returns a scalar root.
pub fn gradcheck<F>(params: &[(String, Tensor)], build: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let root = build(&mut tape, &vars)?;
        tape.value(root).item()
    };

    let mut tape = Tape::new();
    let values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = build(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut report = GradCheckReport {
        worst_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };

    for (pi, (name, _)) in params.iter().enumerate() {
        let analytic = grads
            .get(vars[pi])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(values[pi].shape().to_vec()));
        for ei in 0..values[pi].numel() {
            let mut plus = values.clone();
            plus[pi].data_mut()[ei] += step;
            let mut minus = values.clone();
            minus[pi].data_mut()[ei] -= step;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let ad = analytic.data()[ei];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-3);
            report.checked += 1;
            if rel > report.worst_relative_error {
                report.worst_relative_error = rel;
                report.worst_param = name.clone();
                report.worst_index = ei;
            }
        }
    }
    Ok(report)
}
