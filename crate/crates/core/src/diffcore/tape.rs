//! Dynamic reverse-mode tape.
//!
//! A [`Tape`] records primitive operations as they execute. Values are computed
//! eagerly; [`Tape::backward`] replays the record in reverse to produce exact
//! gradients of a scalar output. The tape is rebuilt for every training step.

use crate::diffcore::attention::{self, AttentionSpec, AttentionSaved};
use crate::diffcore::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Stabilizer used by every layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Storage precision of recorded values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    Double,
    /// Every recorded value is rounded to the nearest `f32`.
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Silu,
    /// tanh approximation of GELU.
    Gelu,
    Tanh,
    Exp,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Tanh => x.tanh(),
            Activation::Exp => x.exp(),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let th = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Exp => x.exp(),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Kind tag of a recorded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    AddScalar,
    Activation,
    LayerNorm,
    Softmax,
    ConcatRows,
    ConcatCols,
    SliceRows,
    SliceCols,
    GatherRows,
    Sum,
    Mean,
    Mse,
    StopGrad,
    Attention,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Activation => "activation",
            OpKind::LayerNorm => "layernorm",
            OpKind::Softmax => "softmax",
            OpKind::ConcatRows => "concat_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceRows => "slice_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::GatherRows => "gather_rows",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Mse => "mse",
            OpKind::StopGrad => "stopgrad",
            OpKind::Attention => "attention",
        }
    }

    pub fn parse(s: &str) -> Option<OpKind> {
        ALL_OPS.iter().copied().find(|k| k.name() == s)
    }
}

/// Every differentiable primitive (excludes leaves).
pub const ALL_OPS: [OpKind; 20] = [
    OpKind::MatMul,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::AddRow,
    OpKind::Scale,
    OpKind::AddScalar,
    OpKind::Activation,
    OpKind::LayerNorm,
    OpKind::Softmax,
    OpKind::ConcatRows,
    OpKind::ConcatCols,
    OpKind::SliceRows,
    OpKind::SliceCols,
    OpKind::GatherRows,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::Mse,
    OpKind::StopGrad,
    OpKind::Attention,
];

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Act(Var, Activation),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Softmax(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { table: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    StopGrad,
    Attention(Box<AttentionSaved>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Act(..) => OpKind::Activation,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax(..) => OpKind::Softmax,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Mse(..) => OpKind::Mse,
            Op::StopGrad => OpKind::StopGrad,
            Op::Attention(..) => OpKind::Attention,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when no gradient reaches it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros of its shape.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// Reverse-mode recording of one forward computation.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    fault: Option<OpKind>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::Double)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            precision,
            fault: None,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Corrupts the backward rule of `kind` (gradient scaled by 1.5).
    /// Used only as a negative control for gradient checking.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
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

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        let node = self.nodes.len();
        if self.precision == Precision::Single {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node,
                op: op.kind().name(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(node))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape_err<T>(&self, op: OpKind, detail: String) -> Result<T> {
        Err(Error::Shape {
            node: self.nodes.len(),
            op: op.name(),
            detail,
        })
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return self.shape_err(OpKind::MatMul, format!("[{m},{k}] x [{k2},{n}]"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), ng)
    }

    fn same_shape(&self, op: OpKind, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return self.shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            );
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(OpKind::Add, a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(OpKind::Sub, a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(OpKind::Mul, a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `a[m,n] + row[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if self.value(row).len() != n {
            return self.shape_err(
                OpKind::AddRow,
                format!("[{m},{n}] + row {:?}", self.shape(row)),
            );
        }
        let r = self.value(row).data();
        let mut v = self.value(a).clone();
        for i in 0..m {
            for (x, b) in v.row_mut(i).iter_mut().zip(r) {
                *x += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| c * x);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        let v = self.value(a).map(|x| act.apply(x));
        let ng = self.needs(a);
        self.push(v, Op::Act(a, act), ng)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Silu)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Gelu)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layernorm(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a);
        let x = self.value(a);
        let mut out = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd.push(r);
            out.extend(row.iter().map(|v| (v - mean) * r));
        }
        let ng = self.needs(a);
        self.push(Tensor::matrix(m, n, out), Op::LayerNorm { x: a, rstd }, ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a);
        let x = self.value(a);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = x.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|v| (v - mx).exp()));
            let z: f64 = out[start..].iter().sum();
            for v in &mut out[start..] {
                *v /= z;
            }
        }
        let ng = self.needs(a);
        self.push(Tensor::matrix(m, n, out), Op::Softmax(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return self.shape_err(OpKind::ConcatRows, "no inputs".into());
        }
        let n = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return self.shape_err(
                    OpKind::ConcatRows,
                    format!("column count {} vs {n}", t.cols()),
                );
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::matrix(rows, n, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return self.shape_err(OpKind::ConcatCols, "no inputs".into());
        }
        let m = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return self.shape_err(OpKind::ConcatCols, "row counts differ".into());
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::matrix(m, n, data), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if len == 0 || start + len > m {
            return self.shape_err(
                OpKind::SliceRows,
                format!("rows {start}..{} of {m}", start + len),
            );
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let ng = self.needs(a);
        self.push(Tensor::matrix(len, n, data), Op::SliceRows { x: a, start }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if len == 0 || start + len > n {
            return self.shape_err(
                OpKind::SliceCols,
                format!("cols {start}..{} of {n}", start + len),
            );
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let ng = self.needs(a);
        self.push(Tensor::matrix(m, len, data), Op::SliceCols { x: a, start }, ng)
    }

    /// Row lookup `table[idx[i]]`; gradients scatter-add back into the table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (m, _) = self.dims2(table);
        if idx.is_empty() {
            return self.shape_err(OpKind::GatherRows, "empty index list".into());
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= m) {
            return self.shape_err(OpKind::GatherRows, format!("row {bad} of {m}"));
        }
        let v = self.value(table).select_rows(idx);
        let ng = self.needs(table);
        self.push(
            v,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(OpKind::Mse, a, b)?;
        let ta = self.value(a);
        let tb = self.value(b);
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / ta.len() as f64;
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(s), Op::Mse(a, b), ng)
    }

    /// Identity in the forward pass; blocks all gradient.
    pub fn stopgrad(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).clone();
        self.push(v, Op::StopGrad, false)
    }

    /// Fused multi-head scaled dot-product attention over row segments.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: &AttentionSpec) -> Result<Var> {
        let node = self.nodes.len();
        let (out, saved) = attention::forward(
            self.value(q),
            self.value(k),
            self.value(v),
            spec,
        )
        .map_err(|detail| Error::Shape {
            node,
            op: OpKind::Attention.name(),
            detail,
        })?;
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let saved = AttentionSaved {
            q,
            k,
            v,
            ..saved
        };
        self.push(out, Op::Attention(Box::new(saved)), ng)
    }

    /// Exact gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return invalid(format!(
                "backward needs a scalar output, node {} has shape {:?}",
                loss.0,
                self.shape(loss)
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(mut g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.needs_grad {
                grads[id] = Some(g);
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                for x in &mut g {
                    *x *= 1.5;
                }
            }
            self.backward_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Gradients that only reached non-trainable nodes are dropped.
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad && i != loss.0 {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.value(*b).cols();
                acc(*a, &mut |ga| {
                    // dA = G · B^T
                    gemm(m, n, k, g, (n as isize, 1), val(*b), (1, n as isize), 1.0, ga);
                });
                acc(*b, &mut |gb| {
                    // dB = A^T · G
                    gemm(k, m, n, val(*a), (1, k as isize), g, (n as isize, 1), 1.0, gb);
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |ga| add_into(ga, g));
                let n = self.value(*row).len();
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += c * y;
                }
            }),
            Op::AddScalar(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Act(a, act) => {
                let x = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * act.derivative(x[i]);
                    }
                })
            }
            Op::LayerNorm { x, rstd } => {
                let y = node.value.data();
                let n = node.value.cols();
                acc(*x, &mut |gx| {
                    for (i, r) in rstd.iter().enumerate() {
                        let gy = &g[i * n..(i + 1) * n];
                        let yr = &y[i * n..(i + 1) * n];
                        let mg = gy.iter().sum::<f64>() / n as f64;
                        let mgy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[i * n + j] += r * (gy[j] - mg - yr[j] * mgy);
                        }
                    }
                })
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                acc(*a, &mut |ga| {
                    for (gr, (yr, gar)) in g
                        .chunks(n)
                        .zip(y.chunks(n).zip(ga.chunks_mut(n)))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let n = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &mut |gp| {
                        for i in 0..m {
                            add_into(&mut gp[i * w..(i + 1) * w], &g[i * n + col..i * n + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = node.value.cols();
                acc(*x, &mut |gx| add_into(&mut gx[start * n..start * n + g.len()], g))
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).cols();
                let w = node.value.cols();
                acc(*x, &mut |gx| {
                    for (i, chunk) in g.chunks(w).enumerate() {
                        add_into(&mut gx[i * n + start..i * n + start + w], chunk);
                    }
                })
            }
            Op::GatherRows { table, idx } => {
                let n = node.value.cols();
                acc(*table, &mut |gt| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gt[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |ga| {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::Mean(a) => acc(*a, &mut |ga| {
                let c = g[0] / ga.len() as f64;
                for x in ga.iter_mut() {
                    *x += c;
                }
            }),
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let c = 2.0 * g[0] / va.len() as f64;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += c * (va[i] - vb[i]);
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= c * (va[i] - vb[i]);
                    }
                });
            }
            Op::Attention(saved) => {
                let (gq, gk, gv) = attention::backward(
                    saved,
                    val(saved.q),
                    val(saved.k),
                    val(saved.v),
                    g,
                );
                acc(saved.q, &mut |x| add_into(x, &gq));
                acc(saved.k, &mut |x| add_into(x, &gk));
                acc(saved.v, &mut |x| add_into(x, &gv));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `c[m,n] = beta * c + a[m,k] · b[k,n]` for strided views of contiguous buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c[..m * n].iter_mut() {
            *x *= beta;
        }
        return;
    }
    // SAFETY: the strides address a dense m×k (resp. k×n) view of a buffer of at
    // least m*k (k*n) elements, checked above; c is a dense m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row_vector(vec![1.0, 2.0])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        assert_eq!(tape.value(s).item(), 5.0);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn stopgrad_blocks_one_factor() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row_vector(vec![3.0])).unwrap();
        let sx = tape.stopgrad(x).unwrap();
        let p = tape.mul(sx, x).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0]);
        assert!(g.get(sx).is_none());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row_vector(vec![1.0, 2.0])).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shape_error_names_node() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        match tape.matmul(a, b) {
            Err(Error::Shape { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("expected shape error, got {other:?}", other = other.map(|v| v.0)),
        }
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row_vector(vec![1e308])).unwrap();
        assert!(matches!(
            tape.scale(a, 10.0),
            Err(Error::NonFinite { node: 1, op: "scale" })
        ));
        assert!(tape.constant(Tensor::row_vector(vec![f64::NAN])).is_err());
    }

    #[test]
    fn layernorm_of_constant_row_is_zero() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::row_vector(vec![2.5; 4])).unwrap();
        let y = tape.layernorm(a).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).unwrap().is_finite());
    }

    #[test]
    fn single_precision_rounds_values() {
        let mut tape = Tape::with_precision(Precision::Single);
        let a = tape.constant(Tensor::row_vector(vec![0.1])).unwrap();
        assert_eq!(tape.value(a).data()[0], 0.1f32 as f64);
    }
}
