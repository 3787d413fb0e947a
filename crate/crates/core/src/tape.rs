//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op appends a node holding its output value and whatever its
//! backward rule needs. Nodes only reference earlier nodes, so walking the
//! tape backwards is a valid reverse topological order. Parameters enter the
//! tape as leaves through [`Tape::param`]; [`Tape::backward_into`] adds their
//! gradients to the owning [`ParamStore`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op kinds, used for fault injection and introspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulTransB,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    AddScalar,
    Sigmoid,
    Relu,
    Abs,
    Square,
    SoftmaxRows,
    LayerNorm,
    Conv1d,
    ConcatCols,
    SliceCols,
    MeanRows,
    LastRow,
    Sum,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::MatMulTransB,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Abs,
        OpKind::Square,
        OpKind::SoftmaxRows,
        OpKind::LayerNorm,
        OpKind::Conv1d,
        OpKind::ConcatCols,
        OpKind::SliceCols,
        OpKind::MeanRows,
        OpKind::LastRow,
        OpKind::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::MatMulTransB => "matmul_transpose_b",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Conv1d => "conv1d",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceCols => "slice_cols",
            OpKind::MeanRows => "mean_rows",
            OpKind::LastRow => "last_row",
            OpKind::Sum => "sum",
        }
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown op {s:?}")))
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    MatMulTransB(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    MeanRows(Var),
    LastRow(Var),
    Sum(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf(_) => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulTransB(..) => OpKind::MatMulTransB,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::Abs(_) => OpKind::Abs,
            Op::Square(_) => OpKind::Square,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::LastRow(_) => OpKind::LastRow,
            Op::Sum(_) => OpKind::Sum,
        }
    }
}

struct Node {
    shape: Shape,
    value: Vec<f32>,
    op: Op,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    leaf_grads: HashMap<usize, Vec<f32>>,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: the backward rule of `kind` returns twice the true gradient.
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &Shape {
        &self.nodes[v.0].shape
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].shape.dims()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value[0]
    }

    /// Copies a node out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_vec(n.shape.dims(), n.value.clone()).expect("node shape is consistent")
    }

    /// Accumulated gradient of a non-parameter leaf.
    /// Which side of its kink every ReLU and `abs` input lies on. Two
    /// evaluations with different signatures straddle a non-differentiable
    /// point, where finite differences are not a valid gradient oracle.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) | Op::Abs(a) = node.op {
                sig.extend(self.nodes[a.0].value.iter().map(|&x| x > 0.0));
            }
        }
        sig
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.clear();
    }

    fn push(&mut self, shape: Shape, value: Vec<f32>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.numel(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].shape.as_matrix(op)
    }

    // ---- leaves -------------------------------------------------------

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().clone(),
            t.data().to_vec(),
            Op::Leaf(None),
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, dims: &[usize], data: Vec<f32>) -> Result<Var> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::dim("constant", dims, &[data.len()]));
        }
        Ok(self.push(shape, data, Op::Leaf(None), false))
    }

    /// Places a parameter on the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.shape().clone(), t.data().to_vec(), Op::Leaf(Some(id)), true);
        self.params.insert(id, v);
        v
    }

    // ---- forward ops --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, p) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", &[m, k], &[k2, p]));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, p);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Shape::matrix(m, p), out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: M×K`, `b: P×K`.
    pub fn matmul_transpose_b(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul_transpose_b")?;
        let (p, k2) = self.mat(b, "matmul_transpose_b")?;
        if k != k2 {
            return Err(Error::dim("matmul_transpose_b", &[m, k], &[p, k2]));
        }
        let out = kernels::matmul_nt(self.value(a), self.value(b), m, k, p);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Shape::matrix(m, p), out, Op::MatMulTransB(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.dims(a), self.dims(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).clone(), out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, p) = self.mat(a, "add_row")?;
        if self.shape(row).numel() != p || self.shape(row).rank() > 2 {
            return Err(Error::dim("add_row", &[m, p], self.dims(row)));
        }
        let bias = self.value(row);
        let mut out = self.value(a).to_vec();
        for r in out.chunks_exact_mut(p.max(1)) {
            for (o, b) in r.iter_mut().zip(bias) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Shape::matrix(m, p), out, Op::AddRow(a, row), rg))
    }

    /// `x · W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).clone(), out, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).iter().map(|x| x + c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).clone(), out, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).clone(), out, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f32::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, p) = self.mat(a, "softmax_rows")?;
        let mut out = self.value(a).to_vec();
        if p > 0 {
            out.chunks_exact_mut(p).for_each(kernels::softmax_in_place);
        }
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).clone(), out, Op::SoftmaxRows(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (t, d) = self.mat(x, "layer_norm")?;
        if d == 0 {
            return Err(Error::Contract("layer_norm needs at least one feature".into()));
        }
        if self.shape(gain).numel() != d || self.shape(bias).numel() != d {
            return Err(Error::dim("layer_norm", &[t, d], self.dims(gain)));
        }
        let (normalized, inv_std) = kernels::standardize_rows(self.value(x), d, LAYER_NORM_EPS);
        let g = self.value(gain);
        let b = self.value(bias);
        let out = normalized
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((n, g), b)| n * g + b))
            .collect();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        };
        Ok(self.push(Shape::matrix(t, d), out, op, rg))
    }

    /// Temporal convolution of `x: T×d_in` with `kernel: k×d_in×d_out`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (t, d_in) = self.mat(x, "conv1d")?;
        let kd = self.dims(kernel).to_vec();
        let [k, kin, d_out] = kd[..] else {
            return Err(Error::dim("conv1d", &[t, d_in], &kd));
        };
        if kin != d_in {
            return Err(Error::dim("conv1d", &[t, d_in], &kd));
        }
        if self.shape(bias).numel() != d_out {
            return Err(Error::dim("conv1d", &[d_out], self.dims(bias)));
        }
        if k % 2 == 0 || stride == 0 {
            return Err(Error::Contract(format!(
                "conv1d needs an odd kernel and positive stride, got k={k}, stride={stride}"
            )));
        }
        let t_out = conv_out_len(t, k, stride, padding).ok_or(Error::SequenceTooShort {
            op: "conv1d",
            len: t,
            kernel: k,
            padding,
            stride,
        })?;
        let geom = kernels::ConvGeom {
            t_in: t,
            t_out,
            d_in,
            d_out,
            k,
            stride,
            padding,
        };
        let out = kernels::conv1d(self.value(x), self.value(kernel), self.value(bias), &geom);
        let rg = self.rg(x) || self.rg(kernel) || self.rg(bias);
        let op = Op::Conv1d {
            x,
            kernel,
            bias,
            stride,
            padding,
        };
        Ok(self.push(Shape::matrix(t_out, d_out), out, op, rg))
    }

    /// Feature-axis concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.mat(a, "concat_cols")?;
        let (rb, cb) = self.mat(b, "concat_cols")?;
        if ra != rb {
            return Err(Error::dim("concat_cols", &[ra, ca], &[rb, cb]));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&self.value(a)[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&self.value(b)[r * cb..(r + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Shape::matrix(ra, ca + cb), out, Op::ConcatCols(a, b), rg))
    }

    /// Columns `start..start + width` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.mat(a, "slice_cols")?;
        if start + width > c {
            return Err(Error::dim("slice_cols", &[r, c], &[start, width]));
        }
        let src = self.value(a);
        let out = (0..r)
            .flat_map(|i| src[i * c + start..i * c + start + width].iter().copied())
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Shape::matrix(r, width), out, Op::SliceCols(a, start), rg))
    }

    /// Mean over rows, as a `1×d` matrix.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat(a, "mean_rows")?;
        if r == 0 {
            return Err(Error::Contract("mean over zero rows".into()));
        }
        let src = self.value(a);
        let mut acc = vec![0.0f64; c];
        for row in src.chunks_exact(c.max(1)) {
            for (o, &x) in acc.iter_mut().zip(row) {
                *o += f64::from(x);
            }
        }
        let out = acc.iter().map(|&v| (v / r as f64) as f32).collect();
        let rg = self.rg(a);
        Ok(self.push(Shape::matrix(1, c), out, Op::MeanRows(a), rg))
    }

    /// Final row, as a `1×d` matrix.
    pub fn last_row(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat(a, "last_row")?;
        if r == 0 {
            return Err(Error::Contract("last row of an empty matrix".into()));
        }
        let out = self.value(a)[(r - 1) * c..].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Shape::matrix(1, c), out, Op::LastRow(a), rg))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = kernels::sum64(self.value(a)) as f32;
        let rg = self.rg(a);
        self.push(Shape::scalar(), vec![s], Op::Sum(a), rg)
    }

    // ---- backward -----------------------------------------------------

    /// Backpropagates from a scalar `loss`. Gradients of non-parameter
    /// leaves accumulate on the tape (see [`Tape::grad`]); parameter
    /// gradients are discarded. Use [`Tape::backward_into`] for training.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let grads = self.run_backward(loss)?;
        self.collect_leaf_grads(grads, None);
        Ok(())
    }

    /// Backpropagates from a scalar `loss` and adds parameter gradients to
    /// `store`. Calling this twice without zeroing doubles every gradient.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.run_backward(loss)?;
        self.collect_leaf_grads(grads, Some(store));
        Ok(())
    }

    fn collect_leaf_grads(&mut self, grads: Vec<Option<Vec<f32>>>, mut store: Option<&mut ParamStore>) {
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match self.nodes[i].op {
                Op::Leaf(Some(id)) => {
                    if let Some(store) = store.as_deref_mut() {
                        store.get_mut(id).accumulate_grad(&g);
                    }
                }
                Op::Leaf(None) => {
                    let acc = self.leaf_grads.entry(i).or_insert_with(|| vec![0.0; g.len()]);
                    acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d);
                }
                _ => {}
            }
        }
    }

    fn run_backward(&self, loss: Var) -> Result<Vec<Option<Vec<f32>>>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if !root.requires_grad {
            return Ok(grads);
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf(_) = node.op {
                grads[i] = Some(g);
                continue;
            }
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|x| *x *= 2.0);
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(grads)
    }

    fn backward_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let mut acc = |v: Var, f: &dyn Fn(&mut [f32])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let dims2 = |v: Var| {
            let d = self.nodes[v.0].shape.dims();
            (d[0], d[1])
        };
        match node.op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(a);
                let (_, p) = dims2(b);
                acc(a, &|ga| kernels::matmul_nt_acc(g, val(b), ga, m, p, k));
                acc(b, &|gb| kernels::matmul_tn_acc(val(a), g, gb, m, k, p));
            }
            Op::MatMulTransB(a, b) => {
                // c = a bᵀ: da = g b, db = gᵀ a
                let (m, k) = dims2(a);
                let (p, _) = dims2(b);
                acc(a, &|ga| kernels::matmul_acc(g, val(b), ga, m, p, k));
                acc(b, &|gb| kernels::matmul_tn_acc(g, val(a), gb, m, p, k));
            }
            Op::Add(a, b) => {
                acc(a, &|ga| add_into(ga, g));
                acc(b, &|gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(a, &|ga| add_into(ga, g));
                acc(b, &|gb| gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                acc(a, &|ga| {
                    for ((x, d), y) in ga.iter_mut().zip(g).zip(val(b)) {
                        *x += d * y;
                    }
                });
                acc(b, &|gb| {
                    for ((x, d), y) in gb.iter_mut().zip(g).zip(val(a)) {
                        *x += d * y;
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(a, &|ga| add_into(ga, g));
                acc(row, &|gr| {
                    let p = gr.len();
                    for r in g.chunks_exact(p.max(1)) {
                        add_into(gr, r);
                    }
                });
            }
            Op::Scale(a, c) => acc(a, &|ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d * c)),
            Op::AddScalar(a) => acc(a, &|ga| add_into(ga, g)),
            Op::Sigmoid(a) => acc(a, &|ga| {
                for ((x, d), s) in ga.iter_mut().zip(g).zip(&node.value) {
                    *x += d * s * (1.0 - s);
                }
            }),
            Op::Relu(a) => acc(a, &|ga| {
                for ((x, d), v) in ga.iter_mut().zip(g).zip(val(a)) {
                    if *v > 0.0 {
                        *x += d;
                    }
                }
            }),
            Op::Abs(a) => acc(a, &|ga| {
                // subgradient 0 at the kink
                for ((x, d), v) in ga.iter_mut().zip(g).zip(val(a)) {
                    if *v > 0.0 {
                        *x += d;
                    } else if *v < 0.0 {
                        *x -= d;
                    }
                }
            }),
            Op::Square(a) => acc(a, &|ga| {
                for ((x, d), v) in ga.iter_mut().zip(g).zip(val(a)) {
                    *x += 2.0 * d * v;
                }
            }),
            Op::SoftmaxRows(a) => {
                let p = node.shape.dims()[1];
                acc(a, &|ga| kernels::softmax_backward_acc(&node.value, g, ga, p));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                ref normalized,
                ref inv_std,
            } => {
                let d = node.shape.dims()[1];
                acc(x, &|gx| kernels::layer_norm_backward_acc(g, normalized, inv_std, val(gain), gx, d));
                acc(gain, &|gg| {
                    for (grow, nrow) in g.chunks_exact(d).zip(normalized.chunks_exact(d)) {
                        for ((o, gi), ni) in gg.iter_mut().zip(grow).zip(nrow) {
                            *o += gi * ni;
                        }
                    }
                });
                acc(bias, &|gb| {
                    for grow in g.chunks_exact(d) {
                        add_into(gb, grow);
                    }
                });
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let kd = self.nodes[kernel.0].shape.dims();
                let geom = kernels::ConvGeom {
                    t_in: self.nodes[x.0].shape.dims()[0],
                    t_out: node.shape.dims()[0],
                    d_in: kd[1],
                    d_out: kd[2],
                    k: kd[0],
                    stride,
                    padding,
                };
                acc(x, &|gx| kernels::conv1d_input_grad_acc(g, val(kernel), gx, &geom));
                acc(kernel, &|gk| kernels::conv1d_kernel_grad_acc(g, val(x), gk, &geom));
                acc(bias, &|gb| {
                    for grow in g.chunks_exact(geom.d_out) {
                        add_into(gb, grow);
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = dims2(a);
                let (_, cb) = dims2(b);
                let c = ca + cb;
                acc(a, &|ga| {
                    for i in 0..r {
                        add_into(&mut ga[i * ca..(i + 1) * ca], &g[i * c..i * c + ca]);
                    }
                });
                acc(b, &|gb| {
                    for i in 0..r {
                        add_into(&mut gb[i * cb..(i + 1) * cb], &g[i * c + ca..(i + 1) * c]);
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let (r, c) = dims2(a);
                let w = node.shape.dims()[1];
                acc(a, &|ga| {
                    for i in 0..r {
                        add_into(&mut ga[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::MeanRows(a) => {
                let (r, c) = dims2(a);
                let inv = 1.0 / r as f32;
                acc(a, &|ga| {
                    for row in ga.chunks_exact_mut(c.max(1)) {
                        for (x, d) in row.iter_mut().zip(g) {
                            *x += d * inv;
                        }
                    }
                });
            }
            Op::LastRow(a) => {
                let (r, c) = dims2(a);
                acc(a, &|ga| add_into(&mut ga[(r - 1) * c..], g));
            }
            Op::Sum(a) => acc(a, &|ga| ga.iter_mut().for_each(|x| *x += g[0])),
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Output length of a strided, zero-padded convolution, or `None` if it
/// would be empty.
pub fn conv_out_len(t: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = t + 2 * padding;
    if span < k || stride == 0 {
        return None;
    }
    Some((span - k) / stride + 1)
}

/// Raw slice kernels shared by the forward and backward passes.
pub(crate) mod kernels {
    /// `a: m×k`, `b: k×p` → `m×p`, accumulated in f64.
    pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, p: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(m * p);
        let mut row = vec![0.0f64; p];
        for i in 0..m {
            row.iter_mut().for_each(|r| *r = 0.0);
            for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let aik = f64::from(aik);
                for (o, &bv) in row.iter_mut().zip(&b[kk * p..(kk + 1) * p]) {
                    *o += aik * f64::from(bv);
                }
            }
            out.extend(row.iter().map(|&v| v as f32));
        }
        out
    }

    /// `out += a · b` for `a: m×k`, `b: k×p`.
    pub fn matmul_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, p: usize) {
        for i in 0..m {
            let orow = &mut out[i * p..(i + 1) * p];
            for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (o, &bv) in orow.iter_mut().zip(&b[kk * p..(kk + 1) * p]) {
                    *o += aik * bv;
                }
            }
        }
    }

    /// `a: m×k`, `b: p×k` → `a · bᵀ`, `m×p`.
    pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, p: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(m * p);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..p {
                out.push(dot64(arow, &b[j * k..(j + 1) * k]) as f32);
            }
        }
        out
    }

    pub fn dot64(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
    }

    pub fn sum64(a: &[f32]) -> f64 {
        a.iter().map(|&x| f64::from(x)).sum()
    }

    /// `out += a · bᵀ` for `a: m×k`, `b: p×k`.
    pub fn matmul_nt_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, p: usize) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..p {
                let brow = &b[j * k..(j + 1) * k];
                out[i * p + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f32>();
            }
        }
    }

    /// `out += aᵀ · b` for `a: m×k`, `b: m×p`, `out: k×p`.
    pub fn matmul_tn_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, p: usize) {
        for i in 0..m {
            let brow = &b[i * p..(i + 1) * p];
            for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (o, &bv) in out[kk * p..(kk + 1) * p].iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
    }

    pub fn softmax_in_place(row: &mut [f32]) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += f64::from(*x);
        }
        row.iter_mut().for_each(|x| *x = (f64::from(*x) / sum) as f32);
    }

    pub fn softmax_backward_acc(y: &[f32], g: &[f32], out: &mut [f32], p: usize) {
        for ((yr, gr), or) in y.chunks_exact(p).zip(g.chunks_exact(p)).zip(out.chunks_exact_mut(p)) {
            let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for ((o, yi), gi) in or.iter_mut().zip(yr).zip(gr) {
                *o += yi * (gi - dot);
            }
        }
    }

    /// Per-row standardisation; returns normalised values and `1/σ` per row.
    pub fn standardize_rows(x: &[f32], d: usize, eps: f32) -> (Vec<f32>, Vec<f32>) {
        let mut out = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(x.len() / d);
        for row in x.chunks_exact(d) {
            let mean = sum64(row) / d as f64;
            let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + f64::from(eps)).sqrt();
            inv_std.push(inv as f32);
            out.extend(row.iter().map(|&v| ((f64::from(v) - mean) * inv) as f32));
        }
        (out, inv_std)
    }

    pub fn layer_norm_backward_acc(g: &[f32], xhat: &[f32], inv_std: &[f32], gain: &[f32], out: &mut [f32], d: usize) {
        let n = d as f32;
        for (((gr, hr), inv), or) in g
            .chunks_exact(d)
            .zip(xhat.chunks_exact(d))
            .zip(inv_std)
            .zip(out.chunks_exact_mut(d))
        {
            let mut sum_dh = 0.0;
            let mut sum_dh_h = 0.0;
            for ((gi, gam), h) in gr.iter().zip(gain).zip(hr) {
                let dh = gi * gam;
                sum_dh += dh;
                sum_dh_h += dh * h;
            }
            for (((o, gi), gam), h) in or.iter_mut().zip(gr).zip(gain).zip(hr) {
                let dh = gi * gam;
                *o += inv / n * (n * dh - sum_dh - h * sum_dh_h);
            }
        }
    }

    pub struct ConvGeom {
        pub t_in: usize,
        pub t_out: usize,
        pub d_in: usize,
        pub d_out: usize,
        pub k: usize,
        pub stride: usize,
        pub padding: usize,
    }

    impl ConvGeom {
        /// Input row feeding output row `t` through tap `j`, if in range.
        fn src_row(&self, t: usize, j: usize) -> Option<usize> {
            (t * self.stride + j).checked_sub(self.padding).filter(|&s| s < self.t_in)
        }
    }

    pub fn conv1d(x: &[f32], kernel: &[f32], bias: &[f32], g: &ConvGeom) -> Vec<f32> {
        let mut out = Vec::with_capacity(g.t_out * g.d_out);
        let mut orow = vec![0.0f64; g.d_out];
        for t in 0..g.t_out {
            orow.iter_mut().zip(bias).for_each(|(o, &b)| *o = f64::from(b));
            for j in 0..g.k {
                let Some(s) = g.src_row(t, j) else { continue };
                let xrow = &x[s * g.d_in..(s + 1) * g.d_in];
                let kj = &kernel[j * g.d_in * g.d_out..(j + 1) * g.d_in * g.d_out];
                for (c, &xv) in xrow.iter().enumerate() {
                    let xv = f64::from(xv);
                    for (o, &kv) in orow.iter_mut().zip(&kj[c * g.d_out..(c + 1) * g.d_out]) {
                        *o += xv * f64::from(kv);
                    }
                }
            }
            out.extend(orow.iter().map(|&v| v as f32));
        }
        out
    }

    pub fn conv1d_input_grad_acc(gout: &[f32], kernel: &[f32], gx: &mut [f32], g: &ConvGeom) {
        for t in 0..g.t_out {
            let grow = &gout[t * g.d_out..(t + 1) * g.d_out];
            for j in 0..g.k {
                let Some(s) = g.src_row(t, j) else { continue };
                let kj = &kernel[j * g.d_in * g.d_out..(j + 1) * g.d_in * g.d_out];
                for c in 0..g.d_in {
                    let dot: f32 = kj[c * g.d_out..(c + 1) * g.d_out].iter().zip(grow).map(|(a, b)| a * b).sum();
                    gx[s * g.d_in + c] += dot;
                }
            }
        }
    }

    pub fn conv1d_kernel_grad_acc(gout: &[f32], x: &[f32], gk: &mut [f32], g: &ConvGeom) {
        for t in 0..g.t_out {
            let grow = &gout[t * g.d_out..(t + 1) * g.d_out];
            for j in 0..g.k {
                let Some(s) = g.src_row(t, j) else { continue };
                let xrow = &x[s * g.d_in..(s + 1) * g.d_in];
                let kj = &mut gk[j * g.d_in * g.d_out..(j + 1) * g.d_in * g.d_out];
                for (c, &xv) in xrow.iter().enumerate() {
                    for (o, &gv) in kj[c * g.d_out..(c + 1) * g.d_out].iter_mut().zip(grow) {
                        *o += xv * gv;
                    }
                }
            }
        }
    }
}
