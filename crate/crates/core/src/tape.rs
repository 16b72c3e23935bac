//! Reverse-mode differentiation over a linear recording of operations.
//!
//! Every op appends one node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse recording order and pushes adjoints to the
//! inputs. Gradients of tracked leaves persist on the tape and accumulate
//! across backward calls until [`Tape::zero_grad`].

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    node: usize,
    tape: u64,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    ConcatCols(usize, usize),
    SliceCols {
        a: usize,
        start: usize,
    },
    RepeatRows {
        a: usize,
        times: usize,
    },
    Reshape(usize),
    SoftmaxRows(usize),
    WeightedRowSum {
        weights: usize,
        rows: usize,
    },
    SelectRows {
        a: usize,
        index: Vec<usize>,
    },
    Sum(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    /// True when a gradient must flow into this node.
    tracked: bool,
    /// Persistent gradient, only kept for tracked leaves.
    grad: Option<Vec<T>>,
}

/// Single-owner recording of one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n] => Ok((1, *n)),
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Output shape for a row-wise op: vectors stay vectors.
fn rowwise_shape(input: &[usize], rows: usize, cols: usize) -> Vec<usize> {
    if input.len() == 1 {
        vec![cols]
    } else {
        vec![rows, cols]
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// `log(sum(exp(row)))` computed with max subtraction.
pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.node >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.node)
    }

    fn node(&self, v: Var) -> &Node<T> {
        let i = self.index(v).expect("variable belongs to a different tape");
        &self.nodes[i]
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded shapes are valid")
    }

    /// Accumulated gradient of a tracked leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        tracked: bool,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
            grad: None,
        });
        Ok(Var {
            node: self.nodes.len() - 1,
            tape: self.id,
        })
    }

    fn tracked(&self, i: usize) -> bool {
        self.nodes[i].tracked
    }

    /// Records a tensor; it is tracked when the tensor has `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push(
            "input",
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.constant_raw(t.shape().to_vec(), t.data().to_vec())
    }

    pub fn constant_raw(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::ShapeData {
                expected: numel(&shape),
                shape,
                found: data.len(),
            });
        }
        self.push("input", shape, data, Op::Leaf, false)
    }

    /// Records a trainable tensor, tracked regardless of its flag.
    pub fn param(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push(
            "parameter",
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            true,
        )
    }

    /// `a[m×n] · b[n×p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, n, p) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let mut out = vec![T::zero(); m * p];
        for i in 0..m {
            let orow = &mut out[i * p..(i + 1) * p];
            for k in 0..n {
                let aik = av[i * n + k];
                let brow = &bv[k * p..(k + 1) * p];
                orow.iter_mut()
                    .zip(brow)
                    .for_each(|(o, &b)| *o = *o + aik * b);
            }
        }
        let tracked = self.tracked(ia) || self.tracked(ib);
        self.push("matmul", vec![m, p], out, Op::MatMul(ia, ib), tracked)
    }

    /// Affine map `x · wᵀ + b` with `w` stored as `[out × in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.index(x)?, self.index(w)?, self.index(b)?);
        let sx = &self.nodes[ix].shape;
        let sw = &self.nodes[iw].shape;
        let sb = &self.nodes[ib].shape;
        let (m, n) = matrix_dims("linear", sx)?;
        if sw.len() != 2 || sw[1] != n {
            return Err(Error::Shape {
                op: "linear",
                lhs: sx.clone(),
                rhs: sw.clone(),
            });
        }
        let out_dim = sw[0];
        if sb.as_slice() != [out_dim] {
            return Err(Error::Shape {
                op: "linear bias",
                lhs: sw.clone(),
                rhs: sb.clone(),
            });
        }
        let shape = rowwise_shape(sx, m, out_dim);
        let (xv, wv, bv) = (
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            &self.nodes[ib].value,
        );
        let mut out = Vec::with_capacity(m * out_dim);
        for i in 0..m {
            let xrow = &xv[i * n..(i + 1) * n];
            for o in 0..out_dim {
                let wrow = &wv[o * n..(o + 1) * n];
                let dot = xrow
                    .iter()
                    .zip(wrow)
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                out.push(bv[o] + dot);
            }
        }
        let tracked = self.tracked(ix) || self.tracked(iw) || self.tracked(ib);
        self.push(
            "linear",
            shape,
            out,
            Op::Linear {
                x: ix,
                w: iw,
                b: ib,
            },
            tracked,
        )
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        if self.nodes[ia].shape != self.nodes[ib].shape {
            return Err(Error::Shape {
                op: name,
                lhs: self.nodes[ia].shape.clone(),
                rhs: self.nodes[ib].shape.clone(),
            });
        }
        let out = self.nodes[ia]
            .value
            .iter()
            .zip(&self.nodes[ib].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.tracked(ia) || self.tracked(ib);
        let shape = self.nodes[ia].shape.clone();
        self.push(name, shape, out, op(ia, ib), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("elementwise_product", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let ia = self.index(a)?;
        let out = self.nodes[ia].value.iter().map(|&v| v * c).collect();
        let shape = self.nodes[ia].shape.clone();
        let tracked = self.tracked(ia);
        self.push("scale", shape, out, Op::Scale(ia, c), tracked)
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(T) -> T,
        op: fn(usize) -> Op<T>,
    ) -> Result<Var> {
        let ia = self.index(a)?;
        let out = self.nodes[ia].value.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[ia].shape.clone();
        let tracked = self.tracked(ia);
        self.push(name, shape, out, op(ia), tracked)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "sigmoid",
            a,
            |v| T::one() / (T::one() + (-v).exp()),
            Op::Sigmoid,
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, T::tanh, Op::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |v| v.max(T::zero()), Op::Relu)
    }

    /// Joins `a[m×p]` and `b[m×q]` into `[m×(p+q)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        let (ma, p) = matrix_dims("concat_cols", sa)?;
        let (mb, q) = matrix_dims("concat_cols", sb)?;
        if ma != mb || sa.len() != sb.len() {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let shape = rowwise_shape(sa, ma, p + q);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let mut out = Vec::with_capacity(ma * (p + q));
        for i in 0..ma {
            out.extend_from_slice(&av[i * p..(i + 1) * p]);
            out.extend_from_slice(&bv[i * q..(i + 1) * q]);
        }
        let tracked = self.tracked(ia) || self.tracked(ib);
        self.push("concat_cols", shape, out, Op::ConcatCols(ia, ib), tracked)
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.index(a)?;
        let sa = &self.nodes[ia].shape;
        let (m, n) = matrix_dims("slice_cols", sa)?;
        if start >= end || end > n {
            return Err(Error::InvalidArgument(format!(
                "column range {start}..{end} outside {n} columns"
            )));
        }
        let w = end - start;
        let shape = rowwise_shape(sa, m, w);
        let av = &self.nodes[ia].value;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&av[i * n + start..i * n + end]);
        }
        let tracked = self.tracked(ia);
        self.push(
            "slice_cols",
            shape,
            out,
            Op::SliceCols { a: ia, start },
            tracked,
        )
    }

    /// Repeats each row of `a[m×n]` `times` times consecutively: `[m·times × n]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let ia = self.index(a)?;
        let (m, n) = matrix_dims("repeat_rows", &self.nodes[ia].shape)?;
        if times == 0 {
            return Err(Error::InvalidArgument(
                "repeat count must be positive".into(),
            ));
        }
        let av = &self.nodes[ia].value;
        let mut out = Vec::with_capacity(m * times * n);
        for i in 0..m {
            for _ in 0..times {
                out.extend_from_slice(&av[i * n..(i + 1) * n]);
            }
        }
        let tracked = self.tracked(ia);
        self.push(
            "repeat_rows",
            vec![m * times, n],
            out,
            Op::RepeatRows { a: ia, times },
            tracked,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let ia = self.index(a)?;
        let shape = shape.into();
        if numel(&shape) != self.nodes[ia].value.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.nodes[ia].shape.clone(),
                rhs: shape,
            });
        }
        let out = self.nodes[ia].value.clone();
        let tracked = self.tracked(ia);
        self.push("reshape", shape, out, Op::Reshape(ia), tracked)
    }

    /// Softmax over the last axis of a vector or each row of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let (_, n) = matrix_dims("softmax", &self.nodes[ia].shape)?;
        let mut out = self.nodes[ia].value.clone();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "softmax input",
            });
        }
        out.chunks_mut(n).for_each(softmax_in_place);
        let shape = self.nodes[ia].shape.clone();
        let tracked = self.tracked(ia);
        self.push("softmax", shape, out, Op::SoftmaxRows(ia), tracked)
    }

    /// For `weights[b×k]` and `rows[b·k × d]`, returns `[b×d]` with
    /// `out[j] = Σ_i weights[j,i] · rows[j·k + i]`.
    pub fn weighted_row_sum(&mut self, weights: Var, rows: Var) -> Result<Var> {
        let (iw, ir) = (self.index(weights)?, self.index(rows)?);
        let (sw, sr) = (&self.nodes[iw].shape, &self.nodes[ir].shape);
        let (b, k) = matrix_dims("weighted_row_sum", sw)?;
        let (bk, d) = matrix_dims("weighted_row_sum", sr)?;
        if b * k != bk {
            return Err(Error::Shape {
                op: "weighted_row_sum",
                lhs: sw.clone(),
                rhs: sr.clone(),
            });
        }
        let shape = rowwise_shape(sw, b, d);
        let (wv, rv) = (&self.nodes[iw].value, &self.nodes[ir].value);
        let mut out = vec![T::zero(); b * d];
        for j in 0..b {
            let orow = &mut out[j * d..(j + 1) * d];
            for i in 0..k {
                let s = wv[j * k + i];
                let row = &rv[(j * k + i) * d..(j * k + i + 1) * d];
                orow.iter_mut().zip(row).for_each(|(o, &r)| *o = *o + s * r);
            }
        }
        let tracked = self.tracked(iw) || self.tracked(ir);
        self.push(
            "weighted_row_sum",
            shape,
            out,
            Op::WeightedRowSum {
                weights: iw,
                rows: ir,
            },
            tracked,
        )
    }

    /// Gathers the listed rows of `a[m×n]` into `[index.len() × n]`.
    pub fn select_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let ia = self.index(a)?;
        let (m, n) = matrix_dims("select_rows", &self.nodes[ia].shape)?;
        if index.is_empty() {
            return Err(Error::InvalidArgument("row selection is empty".into()));
        }
        if let Some(&bad) = index.iter().find(|&&r| r >= m) {
            return Err(Error::InvalidArgument(format!(
                "row {bad} outside {m} rows"
            )));
        }
        let av = &self.nodes[ia].value;
        let mut out = Vec::with_capacity(index.len() * n);
        for &r in index {
            out.extend_from_slice(&av[r * n..(r + 1) * n]);
        }
        let tracked = self.tracked(ia);
        self.push(
            "select_rows",
            vec![index.len(), n],
            out,
            Op::SelectRows {
                a: ia,
                index: index.to_vec(),
            },
            tracked,
        )
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let total = self.nodes[ia].value.iter().copied().sum();
        let tracked = self.tracked(ia);
        self.push("sum", vec![], vec![total], Op::Sum(ia), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a).value.len();
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::from_usize(n).expect("count"))
    }

    /// Fused `-log softmax(logits)[target]` per row; returns `[m]` losses.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.index(logits)?;
        let (m, n) = matrix_dims("softmax_cross_entropy", &self.nodes[il].shape)?;
        if targets.len() != m {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: self.nodes[il].shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::NotOneHot(format!(
                "target index {bad} outside {n} classes"
            )));
        }
        let lv = &self.nodes[il].value;
        let mut probs = lv.clone();
        let mut losses = Vec::with_capacity(m);
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * n..(i + 1) * n];
            losses.push(log_sum_exp(row) - row[t]);
            softmax_in_place(&mut probs[i * n..(i + 1) * n]);
        }
        let tracked = self.tracked(il);
        self.push(
            "softmax_cross_entropy",
            vec![m],
            losses,
            Op::SoftmaxCrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                probs,
            },
            tracked,
        )
    }

    /// Propagates d(loss)/d(node) back to every tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.index(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::NotScalar(self.nodes[root].shape.clone()));
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::with_capacity(root + 1);
        adj.resize_with(root + 1, || None);
        adj[root] = Some(vec![T::one()]);

        for i in (0..=root).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => add_into(acc, &g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut with = |j: usize, f: &mut dyn FnMut(&mut [T])| {
            if nodes[j].tracked {
                let len = nodes[j].value.len();
                f(adj[j].get_or_insert_with(|| vec![T::zero(); len]));
            }
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::MatMul(a, b) => {
                let (m, n) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let p = nodes[*b].shape[1];
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                with(*a, &mut |da| {
                    for r in 0..m {
                        for k in 0..n {
                            let brow = &bv[k * p..(k + 1) * p];
                            let grow = &g[r * p..(r + 1) * p];
                            da[r * n + k] = da[r * n + k]
                                + grow
                                    .iter()
                                    .zip(brow)
                                    .fold(T::zero(), |s, (&x, &y)| s + x * y);
                        }
                    }
                });
                with(*b, &mut |db| {
                    for r in 0..m {
                        for k in 0..n {
                            let a_rk = av[r * n + k];
                            let grow = &g[r * p..(r + 1) * p];
                            db[k * p..(k + 1) * p]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(d, &gv)| *d = *d + a_rk * gv);
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (out_dim, n) = (nodes[*w].shape[0], nodes[*w].shape[1]);
                let m = nodes[*x].value.len() / n;
                let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
                with(*x, &mut |dx| {
                    for r in 0..m {
                        let drow = &mut dx[r * n..(r + 1) * n];
                        for o in 0..out_dim {
                            let gv = g[r * out_dim + o];
                            drow.iter_mut()
                                .zip(&wv[o * n..(o + 1) * n])
                                .for_each(|(d, &wv)| *d = *d + gv * wv);
                        }
                    }
                });
                with(*w, &mut |dw| {
                    for r in 0..m {
                        let xrow = &xv[r * n..(r + 1) * n];
                        for o in 0..out_dim {
                            let gv = g[r * out_dim + o];
                            dw[o * n..(o + 1) * n]
                                .iter_mut()
                                .zip(xrow)
                                .for_each(|(d, &x)| *d = *d + gv * x);
                        }
                    }
                });
                with(*b, &mut |db| {
                    for r in 0..m {
                        add_into(db, &g[r * out_dim..(r + 1) * out_dim]);
                    }
                });
            }
            Op::Add(a, b) => {
                with(*a, &mut |da| add_into(da, g));
                with(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                with(*a, &mut |da| add_into(da, g));
                with(*b, &mut |db| {
                    db.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d - gv)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                with(*a, &mut |da| {
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d = *d + gv * y;
                    }
                });
                with(*b, &mut |db| {
                    for ((d, &gv), &x) in db.iter_mut().zip(g).zip(av) {
                        *d = *d + gv * x;
                    }
                });
            }
            Op::Scale(a, c) => with(*a, &mut |da| {
                da.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + *c * gv)
            }),
            Op::Sigmoid(a) => with(*a, &mut |da| {
                for ((d, &gv), &y) in da.iter_mut().zip(g).zip(out) {
                    *d = *d + gv * y * (T::one() - y);
                }
            }),
            Op::Tanh(a) => with(*a, &mut |da| {
                for ((d, &gv), &y) in da.iter_mut().zip(g).zip(out) {
                    *d = *d + gv * (T::one() - y * y);
                }
            }),
            Op::Relu(a) => with(*a, &mut |da| {
                for ((d, &gv), &y) in da.iter_mut().zip(g).zip(out) {
                    if y > T::zero() {
                        *d = *d + gv;
                    }
                }
            }),
            Op::ConcatCols(a, b) => {
                let p = *nodes[*a].shape.last().expect("matrix");
                let q = *nodes[*b].shape.last().expect("matrix");
                let m = nodes[*a].value.len() / p;
                with(*a, &mut |da| {
                    for r in 0..m {
                        add_into(
                            &mut da[r * p..(r + 1) * p],
                            &g[r * (p + q)..r * (p + q) + p],
                        );
                    }
                });
                with(*b, &mut |db| {
                    for r in 0..m {
                        add_into(
                            &mut db[r * q..(r + 1) * q],
                            &g[r * (p + q) + p..(r + 1) * (p + q)],
                        );
                    }
                });
            }
            Op::SliceCols { a, start } => {
                let n = *nodes[*a].shape.last().expect("matrix");
                let w = *nodes[i].shape.last().expect("matrix");
                let m = nodes[*a].value.len() / n;
                with(*a, &mut |da| {
                    for r in 0..m {
                        add_into(
                            &mut da[r * n + start..r * n + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                });
            }
            Op::RepeatRows { a, times } => {
                let n = *nodes[*a].shape.last().expect("matrix");
                let m = nodes[*a].value.len() / n;
                with(*a, &mut |da| {
                    for r in 0..m {
                        for t in 0..*times {
                            let src = (r * times + t) * n;
                            add_into(&mut da[r * n..(r + 1) * n], &g[src..src + n]);
                        }
                    }
                });
            }
            Op::Reshape(a) => with(*a, &mut |da| add_into(da, g)),
            Op::Sum(a) => with(*a, &mut |da| da.iter_mut().for_each(|d| *d = *d + g[0])),
            Op::SoftmaxRows(a) => {
                let n = *nodes[i].shape.last().expect("matrix");
                with(*a, &mut |da| {
                    for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n))
                    {
                        let dot = grow
                            .iter()
                            .zip(yrow)
                            .fold(T::zero(), |s, (&gv, &y)| s + gv * y);
                        for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = *d + y * (gv - dot);
                        }
                    }
                });
            }
            Op::WeightedRowSum { weights, rows } => {
                let k = *nodes[*weights].shape.last().expect("matrix");
                let b = nodes[*weights].value.len() / k;
                let d = *nodes[*rows].shape.last().expect("matrix");
                let (wv, rv) = (&nodes[*weights].value, &nodes[*rows].value);
                with(*weights, &mut |dw| {
                    for j in 0..b {
                        let grow = &g[j * d..(j + 1) * d];
                        for s in 0..k {
                            let row = &rv[(j * k + s) * d..(j * k + s + 1) * d];
                            dw[j * k + s] = dw[j * k + s]
                                + grow
                                    .iter()
                                    .zip(row)
                                    .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                        }
                    }
                });
                with(*rows, &mut |dr| {
                    for j in 0..b {
                        let grow = &g[j * d..(j + 1) * d];
                        for s in 0..k {
                            let w = wv[j * k + s];
                            dr[(j * k + s) * d..(j * k + s + 1) * d]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(dv, &gv)| *dv = *dv + w * gv);
                        }
                    }
                });
            }
            Op::SelectRows { a, index } => {
                let n = *nodes[*a].shape.last().expect("matrix");
                with(*a, &mut |da| {
                    for (r, &src) in index.iter().enumerate() {
                        add_into(&mut da[src * n..(src + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = *nodes[*logits].shape.last().expect("matrix");
                with(*logits, &mut |dl| {
                    for (r, &t) in targets.iter().enumerate() {
                        let gr = g[r];
                        for c in 0..n {
                            let hot = if c == t { T::one() } else { T::zero() };
                            dl[r * n + c] = dl[r * n + c] + gr * (probs[r * n + c] - hot);
                        }
                    }
                });
            }
        }
    }
}
