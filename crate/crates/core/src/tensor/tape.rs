use std::fmt;

use std::collections::HashMap;

use super::kernels::{axpy, conv1d_backward, conv1d_forward, dot, matmul, weight_kco, ConvShape};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Probability floor applied before taking logs in the cross-entropy ops.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Kind of a recorded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Conv1d,
    LeakyRelu,
    Softmax,
    Sigmoid,
    Tanh,
    Add,
    AddRow,
    Mul,
    Concat,
    ConcatCols,
    Slice,
    SliceCols,
    GatherRows,
    Reshape,
    Sum,
    CrossEntropy,
    SoftmaxCrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 19] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Conv1d,
        OpKind::LeakyRelu,
        OpKind::Softmax,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Add,
        OpKind::AddRow,
        OpKind::Mul,
        OpKind::Concat,
        OpKind::ConcatCols,
        OpKind::Slice,
        OpKind::SliceCols,
        OpKind::GatherRows,
        OpKind::Reshape,
        OpKind::Sum,
        OpKind::CrossEntropy,
        OpKind::SoftmaxCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Conv1d => "conv1d",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Softmax => "softmax",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Mul => "mul",
            OpKind::Concat => "concat",
            OpKind::ConcatCols => "concat_cols",
            OpKind::Slice => "slice",
            OpKind::SliceCols => "slice_cols",
            OpKind::GatherRows => "gather_rows",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
    },
    LeakyRelu(Var, T),
    Softmax(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    Slice { src: Var, offset: usize },
    SliceCols { src: Var, start: usize },
    GatherRows { src: Var, rows: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    CrossEntropy { probs: Var, class: usize },
    SoftmaxCrossEntropy {
        logits: Var,
        class: usize,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Mul(..) => OpKind::Mul,
            Op::Concat(_) => OpKind::Concat,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::Slice { .. } => OpKind::Slice,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Sum(_) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    dims: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order and replays them in reverse.
///
/// A tape belongs to one thread of work. Leaf gradients accumulate across
/// calls to [`Tape::backward`] until [`Tape::zero_grads`].
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    corrupted: Option<OpKind>,
    // conv kernels rearranged for the time-major kernels, by weight node
    conv_kernels: HashMap<usize, Vec<T>>,
}

fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            corrupted: None,
            conv_kernels: HashMap::new(),
        }
    }

    /// Test hook: the backward rule of `kind` returns doubled gradients.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.corrupted = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, dims: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&dims), value.len());
        self.nodes.push(Node {
            dims,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable leaf holding a copy of `t`.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.dims().to_vec(), t.values().to_vec(), Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient (input data).
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.dims().to_vec(), t.values().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, dims: Vec<usize>, values: Vec<T>) -> Result<Var> {
        if numel(&dims) != values.len() || dims.contains(&0) {
            return Err(Error::shape(
                "constant",
                format!("dims {dims:?} vs {} values", values.len()),
            ));
        }
        Ok(self.push(dims, values, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.dims.clone(), n.value.clone()).expect("tape nodes hold valid shapes")
    }

    /// Accumulated gradient of a trainable leaf. Unreached leaves read as
    /// zeros after any backward pass.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// Hash of the sign pattern of every leaky-ReLU input on the tape. Two
    /// evaluations with equal signatures lie on the same linear piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for node in &self.nodes {
            if let Op::LeakyRelu(x, _) = node.op {
                for &v in &self.nodes[x.0].value {
                    h ^= (v > T::zero()) as u64;
                    h = h.wrapping_mul(0x0100_0000_01B3);
                }
            }
        }
        h
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(Error::shape(
                "matmul",
                format!("left {da:?} and right {db:?} are not compatible"),
            ));
        }
        let (m, k, n) = (da[0], da[1], db[1]);
        let mut out = vec![T::zero(); m * n];
        matmul(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Valid (unpadded) 1-D convolution of a `C_in×L` input with a
    /// `C_out×C_in×K` kernel.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (di, dw, db) = (self.dims(input), self.dims(weight), self.dims(bias));
        if di.len() != 2 || dw.len() != 3 || db.len() != 1 {
            return Err(Error::shape(
                "conv1d",
                format!("input {di:?}, weight {dw:?}, bias {db:?}"),
            ));
        }
        let (c_in, len) = (di[0], di[1]);
        let (c_out, wc, k) = (dw[0], dw[1], dw[2]);
        if wc != c_in || db[0] != c_out {
            return Err(Error::shape(
                "conv1d",
                format!("input channels {c_in} vs weight {dw:?}, bias {db:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv1d", "stride must be positive"));
        }
        if len < k {
            return Err(Error::shape(
                "conv1d",
                format!("input length {len} shorter than kernel {k}"),
            ));
        }
        let l_out = (len - k) / stride + 1;
        let shape = ConvShape {
            c_in,
            len,
            c_out,
            k,
            stride,
            l_out,
        };
        if !self.conv_kernels.contains_key(&weight.0) {
            let wk = weight_kco(self.value(weight), &shape);
            self.conv_kernels.insert(weight.0, wk);
        }
        let out = conv1d_forward(
            self.value(input),
            &self.conv_kernels[&weight.0],
            self.value(bias),
            &shape,
        );
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            vec![c_out, l_out],
            out,
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
            },
            rg,
        ))
    }

    /// `max(x, slope·x)`; the subgradient at exactly zero is `slope`.
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { slope * v })
            .collect();
        let dims = self.dims(x).to_vec();
        let rg = self.rg(x);
        self.push(dims, out, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| {
                // Split on sign so exp never overflows.
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            })
            .collect();
        let dims = self.dims(x).to_vec();
        let rg = self.rg(x);
        self.push(dims, out, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let dims = self.dims(x).to_vec();
        let rg = self.rg(x);
        self.push(dims, out, Op::Tanh(x), rg)
    }

    /// Softmax over all entries of `x`, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_values(self.value(x));
        let dims = self.dims(x).to_vec();
        let rg = self.rg(x);
        self.push(dims, out, Op::Softmax(x), rg)
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let dims = self.dims(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(dims, out, Op::Add(a, b), rg))
    }

    /// Adds the vector `row` to every row of the matrix `m` (bias broadcast).
    /// A 1-D `m` is treated as a single row.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (dm, dr) = (self.dims(m), self.dims(row));
        let cols = *dm.last().expect("dims nonempty");
        if dr.len() != 1 || dr[0] != cols || dm.len() > 2 {
            return Err(Error::shape("add_row", format!("matrix {dm:?} and row {dr:?}")));
        }
        let r = self.value(row);
        let out = self
            .value(m)
            .chunks_exact(cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| x + y))
            .collect();
        let dims = dm.to_vec();
        let rg = self.rg(m) || self.rg(row);
        Ok(self.push(dims, out, Op::AddRow(m, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let dims = self.dims(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(dims, out, Op::Mul(a, b), rg))
    }

    /// Concatenates the flattened values of `parts` into a vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "nothing to concatenate"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).len()).sum();
        let mut out = Vec::with_capacity(total);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![total], out, Op::Concat(parts.to_vec()), rg))
    }

    /// Contiguous slice of the flattened values of `src`, shaped as `dims`.
    pub fn slice(&mut self, src: Var, offset: usize, dims: Vec<usize>) -> Result<Var> {
        let len = numel(&dims);
        let n = self.value(src).len();
        if len == 0 || offset + len > n {
            return Err(Error::shape(
                "slice",
                format!("range {offset}..{} out of {n}", offset + len),
            ));
        }
        let out = self.value(src)[offset..offset + len].to_vec();
        let rg = self.rg(src);
        Ok(self.push(dims, out, Op::Slice { src, offset }, rg))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.dims(v) {
            &[r, c] => Ok((r, c)),
            d => Err(Error::shape(op, format!("expected a matrix, got dims {d:?}"))),
        }
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "nothing to concatenate"));
        };
        let rows = self.matrix_dims("concat_cols", first)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts {rows} and {r} differ"),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, src: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("slice_cols", src)?;
        if width == 0 || start + width > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} out of {cols}", start + width),
            ));
        }
        let v = self.value(src);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + start + width]);
        }
        let rg = self.rg(src);
        Ok(self.push(vec![rows, width], out, Op::SliceCols { src, start }, rg))
    }

    /// The listed rows of a matrix, in order (repeats allowed).
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.matrix_dims("gather_rows", src)?;
        if rows.is_empty() {
            return Err(Error::shape("gather_rows", "no rows requested"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of {n}")));
        }
        let v = self.value(src);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&v[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(src);
        let op = Op::GatherRows {
            src,
            rows: rows.to_vec(),
        };
        Ok(self.push(vec![rows.len(), cols], out, op, rg))
    }

    pub fn reshape(&mut self, src: Var, dims: Vec<usize>) -> Result<Var> {
        if numel(&dims) != self.value(src).len() || dims.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} into {dims:?}", self.dims(src)),
            ));
        }
        let out = self.value(src).to_vec();
        let rg = self.rg(src);
        Ok(self.push(dims, out, Op::Reshape(src), rg))
    }

    pub fn sum(&mut self, src: Var) -> Var {
        let s = self.value(src).iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(src);
        self.push(vec![1], vec![s], Op::Sum(src), rg)
    }

    /// `-ln(max(probs[class], 1e-12))`.
    pub fn cross_entropy(&mut self, probs: Var, class: usize) -> Result<Var> {
        let n = self.value(probs).len();
        if class >= n {
            return Err(Error::shape(
                "cross_entropy",
                format!("class {class} out of range for {n} outputs"),
            ));
        }
        let p = self.value(probs)[class].max(T::lit(PROB_FLOOR));
        let rg = self.rg(probs);
        Ok(self.push(vec![1], vec![-p.ln()], Op::CrossEntropy { probs, class }, rg))
    }

    /// Softmax followed by cross-entropy, differentiated as `p - onehot`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, class: usize) -> Result<Var> {
        let n = self.value(logits).len();
        if class >= n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("class {class} out of range for {n} outputs"),
            ));
        }
        let probs = softmax_values(self.value(logits));
        let loss = -probs[class].max(T::lit(PROB_FLOOR)).ln();
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                class,
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from the scalar `loss`, accumulating into the gradient
    /// buffers of every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got dims {:?}", self.dims(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                match (grads[i].take(), self.grads[i].as_mut()) {
                    (Some(g), Some(slot)) => slot.iter_mut().zip(g).for_each(|(d, s)| *d += s),
                    (Some(g), None) => self.grads[i] = Some(g),
                    (None, _) => {}
                }
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.corrupted == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v = *v + *v);
            }
            self.backprop_node(i, &g, &mut grads);
        }
        // Trainable leaves not on the loss path (or recorded later) read as zero.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.grads[i].is_none() {
                self.grads[i] = Some(vec![T::zero(); node.value.len()]);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                grad_slot(grads, $v, nodes[$v.0].value.len())
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].dims[0], nodes[a.0].dims[1]);
                let n = nodes[b.0].dims[1];
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if wants(*a) {
                    let ga = acc!(*a);
                    for kk in 0..k {
                        let brow = &bv[kk * n..(kk + 1) * n];
                        for r in 0..m {
                            ga[r * k + kk] += dot(&g[r * n..(r + 1) * n], brow);
                        }
                    }
                }
                if wants(*b) {
                    let gb = acc!(*b);
                    for kk in 0..k {
                        let gbrow = &mut gb[kk * n..(kk + 1) * n];
                        for r in 0..m {
                            let aik = av[r * k + kk];
                            if aik != T::zero() {
                                axpy(aik, &g[r * n..(r + 1) * n], gbrow);
                            }
                        }
                    }
                }
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
            } => {
                let shape = ConvShape {
                    c_in: nodes[input.0].dims[0],
                    len: nodes[input.0].dims[1],
                    c_out: nodes[weight.0].dims[0],
                    k: nodes[weight.0].dims[2],
                    stride: *stride,
                    l_out: node.dims[1],
                };
                let out = conv1d_backward(
                    &nodes[input.0].value,
                    &self.conv_kernels[&weight.0],
                    g,
                    &shape,
                    [wants(*input), wants(*weight), wants(*bias)],
                );
                for (v, part) in [(*input, out.input), (*weight, out.weight), (*bias, out.bias)] {
                    if let Some(part) = part {
                        let dst = acc!(v);
                        dst.iter_mut().zip(part).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = &nodes[x.0].value;
                let gx = acc!(*x);
                for ((d, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                    *d += if v > T::zero() { gv } else { *slope * gv };
                }
            }
            Op::Sigmoid(x) => {
                let gx = acc!(*x);
                for ((d, &gv), &s) in gx.iter_mut().zip(g).zip(&node.value) {
                    *d += gv * s * (T::one() - s);
                }
            }
            Op::Tanh(x) => {
                let gx = acc!(*x);
                for ((d, &gv), &t) in gx.iter_mut().zip(g).zip(&node.value) {
                    *d += gv * (T::one() - t * t);
                }
            }
            Op::Softmax(x) => {
                let s = &node.value;
                let inner = g.iter().zip(s).fold(T::zero(), |a, (&gv, &sv)| a + gv * sv);
                let gx = acc!(*x);
                for ((d, &gv), &sv) in gx.iter_mut().zip(g).zip(s) {
                    *d += sv * (gv - inner);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        let gv = acc!(v);
                        gv.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::AddRow(m, row) => {
                if wants(*m) {
                    let gm = acc!(*m);
                    gm.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if wants(*row) {
                    let cols = nodes[row.0].value.len();
                    let gr = acc!(*row);
                    for chunk in g.chunks_exact(cols) {
                        gr.iter_mut().zip(chunk).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = &nodes[b.0].value;
                    let ga = acc!(*a);
                    for ((d, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if wants(*b) {
                    let av = &nodes[a.0].value;
                    let gb = acc!(*b);
                    for ((d, &gv), &x) in gb.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    if wants(p) {
                        let gp = acc!(p);
                        gp.iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(d, &s)| *d += s);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.dims[1];
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].dims[1];
                    if wants(p) {
                        let gp = acc!(p);
                        for (r, dst) in gp.chunks_exact_mut(w).enumerate() {
                            let src = &g[r * total + off..r * total + off + w];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { src, start } => {
                let cols = nodes[src.0].dims[1];
                let w = node.dims[1];
                let gs = acc!(*src);
                for (r, grow) in g.chunks_exact(w).enumerate() {
                    let dst = &mut gs[r * cols + start..r * cols + start + w];
                    dst.iter_mut().zip(grow).for_each(|(d, &s)| *d += s);
                }
            }
            Op::GatherRows { src, rows } => {
                let cols = nodes[src.0].dims[1];
                let gs = acc!(*src);
                for (&r, grow) in rows.iter().zip(g.chunks_exact(cols)) {
                    let dst = &mut gs[r * cols..(r + 1) * cols];
                    dst.iter_mut().zip(grow).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Slice { src, offset } => {
                let gs = acc!(*src);
                gs[*offset..*offset + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, &s)| *d += s);
            }
            Op::Reshape(src) => {
                let gs = acc!(*src);
                gs.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
            Op::Sum(src) => {
                let gs = acc!(*src);
                gs.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::CrossEntropy { probs, class } => {
                let p = nodes[probs.0].value[*class];
                let gp = acc!(*probs);
                if p > T::lit(PROB_FLOOR) {
                    gp[*class] += -g[0] / p;
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                class,
                probs,
            } => {
                let gl = acc!(*logits);
                for (j, (d, &p)) in gl.iter_mut().zip(probs).enumerate() {
                    let target = if j == *class { T::one() } else { T::zero() };
                    *d += g[0] * (p - target);
                }
            }
        }
    }
}

fn grad_slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

pub(crate) fn softmax_values<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut out: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum = out.iter().fold(T::zero(), |a, &v| a + v);
    out.iter_mut().for_each(|v| *v = *v / sum);
    out
}
