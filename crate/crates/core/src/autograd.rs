//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! the recipe for its vector-Jacobian product. Trainable tensors live in a
//! [`ParamStore`] and enter a graph through [`Graph::param`]; anything else
//! enters as a constant through [`Graph::constant`] and never receives a
//! gradient. Frozen extractors therefore stay frozen structurally: their
//! weights are plain matrices that never touch a tape.

use std::cell::{Ref, RefCell};

use sha2::{Digest, Sha256};

use crate::tensor::{dot, matmul_into, Matrix};

pub type ParamId = usize;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Matrix,
    pub trainable: bool,
}

/// Named, ordered collection of parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(self.id_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, trainable: true });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.entries[id].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id].trainable = trainable;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id].trainable
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.entries.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update((e.value.rows() as u64).to_le_bytes());
            h.update((e.value.cols() as u64).to_le_bytes());
            for v in e.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

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
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    GroupedMatMulT(Var, Var, usize),
    GroupedMatMul(Var, Var, usize),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    MulScalarVar(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, f64),
    MeanRows(Var),
    SumCols(Var),
    SumAll(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// A single-use computation tape.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Matrix)>,
}

impl Gradients {
    /// Gradient with respect to a parameter, summed over all its uses.
    /// `None` when the parameter never influenced the loss.
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Keeps only the listed parameters.
    pub fn restricted_to(mut self, keep: &[ParamId]) -> Self {
        self.params.retain(|(p, _)| keep.contains(p));
        self
    }

    pub fn params(&self) -> &[(ParamId, Matrix)] {
        &self.params
    }

    pub fn var(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn log_softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

fn layer_norm_rows(x: &Matrix, eps: f64) -> Matrix {
    let mut out = x.clone();
    let c = x.cols() as f64;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mu = row.iter().sum::<f64>() / c;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mu) * inv;
        }
    }
    out
}

fn grouped_matmul_t(a: &Matrix, b: &Matrix, groups: usize) -> Matrix {
    let ga = a.rows() / groups;
    let gb = b.rows() / groups;
    let mut out = Matrix::zeros(a.rows(), gb);
    for g in 0..groups {
        for i in 0..ga {
            let ar = a.row(g * ga + i);
            for j in 0..gb {
                out.set(g * ga + i, j, dot(ar, b.row(g * gb + j)));
            }
        }
    }
    out
}

fn grouped_matmul(p: &Matrix, v: &Matrix, groups: usize) -> Matrix {
    let ga = p.rows() / groups;
    let gb = v.rows() / groups;
    let d = v.cols();
    let mut out = Matrix::zeros(p.rows(), d);
    for g in 0..groups {
        let pa = &p.data()[g * ga * gb..(g + 1) * ga * gb];
        let vb = &v.data()[g * gb * d..(g + 1) * gb * d];
        matmul_into(pa, vb, &mut out.data_mut()[g * ga * d..(g + 1) * ga * d], ga, gb, d);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::with_capacity(256)) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op) -> Var {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            let ng = |v: &Var| nodes[v.0].needs_grad;
            match &op {
                Op::Leaf => false,
                Op::Param(_) => true,
                Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.iter().any(ng),
                Op::MatMul(a, b)
                | Op::MatMulT(a, b)
                | Op::GroupedMatMulT(a, b, _)
                | Op::GroupedMatMul(a, b, _)
                | Op::Add(a, b)
                | Op::Sub(a, b)
                | Op::Mul(a, b)
                | Op::Div(a, b)
                | Op::AddRow(a, b)
                | Op::MulRow(a, b)
                | Op::AddCol(a, b)
                | Op::MulCol(a, b)
                | Op::MulScalarVar(a, b) => ng(a) || ng(b),
                Op::Transpose(a)
                | Op::Scale(a, _)
                | Op::AddScalar(a)
                | Op::Relu(a)
                | Op::Gelu(a)
                | Op::Tanh(a)
                | Op::Exp(a)
                | Op::Log(a)
                | Op::Sqrt(a)
                | Op::Square(a)
                | Op::SoftmaxRows(a)
                | Op::LogSoftmaxRows(a)
                | Op::LayerNormRows(a, _)
                | Op::MeanRows(a)
                | Op::SumCols(a)
                | Op::SumAll(a)
                | Op::SliceCols(a, _)
                | Op::GatherRows(a, _)
                | Op::Reshape(a) => ng(a),
            }
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn unary(&self, a: Var, f: impl FnOnce(&Matrix) -> Matrix, op: Op) -> Var {
        let value = f(&self.value(a));
        self.push(value, op)
    }

    fn binary(&self, a: Var, b: Var, f: impl FnOnce(&Matrix, &Matrix) -> Matrix, op: Op) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        self.push(value, op)
    }

    pub fn constant(&self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Enters a parameter. Frozen parameters come in as constants.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        let m = store.get(id).clone();
        if store.is_trainable(id) {
            self.push(m, Op::Param(id))
        } else {
            self.push(m, Op::Leaf)
        }
    }

    /// Copy of `a` cut off from the tape.
    pub fn detach(&self, a: Var) -> Var {
        let m = self.value(a).clone();
        self.constant(m)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.matmul(y), Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.matmul_t(y), Op::MatMulT(a, b))
    }

    /// Block-wise `a_g · b_gᵀ` for `groups` equal row blocks of `a` and `b`;
    /// output is `(G·ga) × gb`.
    pub fn grouped_matmul_t(&self, a: Var, b: Var, groups: usize) -> Var {
        {
            let (ar, ac) = self.shape(a);
            let (br, bc) = self.shape(b);
            assert!(groups > 0 && ar % groups == 0 && br % groups == 0 && ac == bc, "grouped_matmul_t shapes");
        }
        self.binary(a, b, |x, y| grouped_matmul_t(x, y, groups), Op::GroupedMatMulT(a, b, groups))
    }

    /// Block-wise `p_g · v_g`; `p` is `(G·ga) × gb`, `v` is `(G·gb) × d`.
    pub fn grouped_matmul(&self, p: Var, v: Var, groups: usize) -> Var {
        {
            let (pr, pc) = self.shape(p);
            let (vr, _) = self.shape(v);
            assert!(groups > 0 && pr % groups == 0 && vr % groups == 0 && vr / groups == pc, "grouped_matmul shapes");
        }
        self.binary(p, v, |x, y| grouped_matmul(x, y, groups), Op::GroupedMatMul(p, v, groups))
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.unary(a, Matrix::transpose, Op::Transpose(a))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.zip_map(y, |p, q| p + q), Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.zip_map(y, |p, q| p - q), Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.zip_map(y, |p, q| p * q), Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.zip_map(y, |p, q| p / q), Op::Div(a, b))
    }

    /// `a + row` with a `1 × C` row broadcast over all rows.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        self.binary(a, row, |x, r| broadcast_row(x, r, |p, q| p + q), Op::AddRow(a, row))
    }

    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        self.binary(a, row, |x, r| broadcast_row(x, r, |p, q| p * q), Op::MulRow(a, row))
    }

    /// `a + col` with an `S × 1` column broadcast over all columns.
    pub fn add_col(&self, a: Var, col: Var) -> Var {
        self.binary(a, col, |x, c| broadcast_col(x, c, |p, q| p + q), Op::AddCol(a, col))
    }

    pub fn mul_col(&self, a: Var, col: Var) -> Var {
        self.binary(a, col, |x, c| broadcast_col(x, c, |p, q| p * q), Op::MulCol(a, col))
    }

    /// `a` times a `1 × 1` variable.
    pub fn mul_scalar_var(&self, a: Var, s: Var) -> Var {
        self.binary(
            a,
            s,
            |x, sv| {
                let k = sv.item();
                x.map(|p| p * k)
            },
            Op::MulScalarVar(a, s),
        )
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x.scale(s), Op::Scale(a, s))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x.map(|p| p + s), Op::AddScalar(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(|p| p.max(0.0)), Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(gelu), Op::Gelu(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(f64::tanh), Op::Tanh(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(f64::exp), Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(f64::ln), Op::Log(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(f64::sqrt), Op::Sqrt(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(|p| p * p), Op::Square(a))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        self.unary(a, softmax_rows, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        self.unary(a, log_softmax_rows, Op::LogSoftmaxRows(a))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm_rows(&self, a: Var, eps: f64) -> Var {
        self.unary(a, |x| layer_norm_rows(x, eps), Op::LayerNormRows(a, eps))
    }

    /// Mean over rows: `S × C → 1 × C`.
    pub fn mean_rows(&self, a: Var) -> Var {
        self.unary(a, Matrix::mean_rows, Op::MeanRows(a))
    }

    /// Sum over columns: `S × C → S × 1`.
    pub fn sum_cols(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| Matrix::col_vector((0..x.rows()).map(|r| x.row(r).iter().sum()).collect()),
            Op::SumCols(a),
        )
    }

    pub fn sum_all(&self, a: Var) -> Var {
        self.unary(a, |x| Matrix::scalar(x.sum()), Op::SumAll(a))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = {
            let v = self.value(a);
            v.len() as f64
        };
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        self.unary(a, |x| x.slice_cols(start, len), Op::SliceCols(a, start))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows();
            let total: usize = parts.iter().map(|p| nodes[p.0].value.cols()).sum();
            let mut out = Matrix::zeros(rows, total);
            let mut off = 0;
            for p in parts {
                let m = &nodes[p.0].value;
                assert_eq!(m.rows(), rows, "concat_cols row mismatch");
                for r in 0..rows {
                    out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
                }
                off += m.cols();
            }
            out
        };
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let m = &nodes[p.0].value;
                assert_eq!(m.cols(), cols, "concat_rows col mismatch");
                data.extend_from_slice(m.data());
                rows += m.rows();
            }
            Matrix::from_vec(rows, cols, data)
        };
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        self.unary(a, |x| x.gather_rows(idx), Op::GatherRows(a, idx.to_vec()))
    }

    /// Row-major reinterpretation with the same element count.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        self.unary(
            a,
            |x| {
                assert_eq!(x.len(), rows * cols, "reshape element count");
                Matrix::from_vec(rows, cols, x.data().to_vec())
            },
            Op::Reshape(a),
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.shape(), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut params: Vec<(ParamId, Matrix)> = Vec::new();

        fn acc(grads: &mut [Option<Matrix>], nodes: &[Node], v: Var, g: Matrix) {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].clone() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let val = |v: &Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match params.iter_mut().find(|(p, _)| p == id) {
                    Some((_, g)) => g.add_assign(&gout),
                    None => params.push((*id, gout.clone())),
                },
                Op::MatMul(a, b) => {
                    if nodes[a.0].needs_grad {
                        acc(&mut grads, &nodes, *a, gout.matmul_t(val(b)));
                    }
                    if nodes[b.0].needs_grad {
                        acc(&mut grads, &nodes, *b, val(a).t_matmul(&gout));
                    }
                }
                Op::MatMulT(a, b) => {
                    if nodes[a.0].needs_grad {
                        acc(&mut grads, &nodes, *a, gout.matmul(val(b)));
                    }
                    if nodes[b.0].needs_grad {
                        acc(&mut grads, &nodes, *b, gout.t_matmul(val(a)));
                    }
                }
                Op::GroupedMatMulT(a, b, groups) => {
                    let (av, bv) = (val(a), val(b));
                    let ga = av.rows() / groups;
                    let gb = bv.rows() / groups;
                    let d = av.cols();
                    let mut da = Matrix::zeros(av.rows(), d);
                    let mut db = Matrix::zeros(bv.rows(), d);
                    for g in 0..*groups {
                        for ii in 0..ga {
                            let row = g * ga + ii;
                            for jj in 0..gb {
                                let c = gout.get(row, jj);
                                if c == 0.0 {
                                    continue;
                                }
                                let brow = g * gb + jj;
                                for k in 0..d {
                                    da.data_mut()[row * d + k] += c * bv.get(brow, k);
                                    db.data_mut()[brow * d + k] += c * av.get(row, k);
                                }
                            }
                        }
                    }
                    acc(&mut grads, &nodes, *a, da);
                    acc(&mut grads, &nodes, *b, db);
                }
                Op::GroupedMatMul(p, v, groups) => {
                    let (pv, vv) = (val(p), val(v));
                    let ga = pv.rows() / groups;
                    let gb = vv.rows() / groups;
                    let d = vv.cols();
                    let mut dp = Matrix::zeros(pv.rows(), gb);
                    let mut dv = Matrix::zeros(vv.rows(), d);
                    for g in 0..*groups {
                        for ii in 0..ga {
                            let row = g * ga + ii;
                            let go = gout.row(row);
                            for jj in 0..gb {
                                let vrow = g * gb + jj;
                                dp.set(row, jj, dot(go, vv.row(vrow)));
                                let pval = pv.get(row, jj);
                                if pval != 0.0 {
                                    for (k, gk) in go.iter().enumerate() {
                                        dv.data_mut()[vrow * d + k] += pval * gk;
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, &nodes, *p, dp);
                    acc(&mut grads, &nodes, *v, dv);
                }
                Op::Transpose(a) => acc(&mut grads, &nodes, *a, gout.transpose()),
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *a, gout.clone());
                    acc(&mut grads, &nodes, *b, gout);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *a, gout.clone());
                    acc(&mut grads, &nodes, *b, gout.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, &nodes, *a, gout.zip_map(val(b), |g, y| g * y));
                    acc(&mut grads, &nodes, *b, gout.zip_map(val(a), |g, x| g * x));
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    acc(&mut grads, &nodes, *a, gout.zip_map(bv, |g, y| g / y));
                    let mut db = gout.zip_map(av, |g, x| g * x);
                    db = db.zip_map(bv, |gx, y| -gx / (y * y));
                    acc(&mut grads, &nodes, *b, db);
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, &nodes, *r, col_sums(&gout));
                    acc(&mut grads, &nodes, *a, gout);
                }
                Op::MulRow(a, r) => {
                    let (av, rv) = (val(a), val(r));
                    acc(&mut grads, &nodes, *r, col_sums(&gout.zip_map(av, |g, x| g * x)));
                    acc(&mut grads, &nodes, *a, broadcast_row(&gout, rv, |g, y| g * y));
                }
                Op::AddCol(a, c) => {
                    acc(&mut grads, &nodes, *c, row_sums(&gout));
                    acc(&mut grads, &nodes, *a, gout);
                }
                Op::MulCol(a, c) => {
                    let (av, cv) = (val(a), val(c));
                    acc(&mut grads, &nodes, *c, row_sums(&gout.zip_map(av, |g, x| g * x)));
                    acc(&mut grads, &nodes, *a, broadcast_col(&gout, cv, |g, y| g * y));
                }
                Op::MulScalarVar(a, s) => {
                    let (av, sv) = (val(a), val(s));
                    acc(&mut grads, &nodes, *s, Matrix::scalar(dot(gout.data(), av.data())));
                    let k = sv.item();
                    acc(&mut grads, &nodes, *a, gout.scale(k));
                }
                Op::Scale(a, s) => acc(&mut grads, &nodes, *a, gout.scale(*s)),
                Op::AddScalar(a) => acc(&mut grads, &nodes, *a, gout),
                Op::Relu(a) => {
                    acc(&mut grads, &nodes, *a, gout.zip_map(val(a), |g, x| if x > 0.0 { g } else { 0.0 }))
                }
                Op::Gelu(a) => acc(&mut grads, &nodes, *a, gout.zip_map(val(a), |g, x| g * gelu_grad(x))),
                Op::Tanh(a) => acc(&mut grads, &nodes, *a, gout.zip_map(&node.value, |g, y| g * (1.0 - y * y))),
                Op::Exp(a) => acc(&mut grads, &nodes, *a, gout.zip_map(&node.value, |g, y| g * y)),
                Op::Log(a) => acc(&mut grads, &nodes, *a, gout.zip_map(val(a), |g, x| g / x)),
                Op::Sqrt(a) => acc(&mut grads, &nodes, *a, gout.zip_map(&node.value, |g, y| 0.5 * g / y)),
                Op::Square(a) => acc(&mut grads, &nodes, *a, gout.zip_map(val(a), |g, x| 2.0 * g * x)),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let s = dot(gout.row(r), y.row(r));
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = y.get(r, c) * (gout.get(r, c) - s);
                        }
                    }
                    acc(&mut grads, &nodes, *a, dx);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let s: f64 = gout.row(r).iter().sum();
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = gout.get(r, c) - y.get(r, c).exp() * s;
                        }
                    }
                    acc(&mut grads, &nodes, *a, dx);
                }
                Op::LayerNormRows(a, eps) => {
                    let x = val(a);
                    let y = &node.value;
                    let c = x.cols() as f64;
                    let mut dx = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let xr = x.row(r);
                        let mu = xr.iter().sum::<f64>() / c;
                        let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g = gout.row(r);
                        let mg = g.iter().sum::<f64>() / c;
                        let mgy = dot(g, y.row(r)) / c;
                        for (k, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = inv * (g[k] - mg - y.get(r, k) * mgy);
                        }
                    }
                    acc(&mut grads, &nodes, *a, dx);
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = val(a).shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    let inv = 1.0 / rows as f64;
                    for r in 0..rows {
                        for (d, g) in dx.row_mut(r).iter_mut().zip(gout.row(0)) {
                            *d = g * inv;
                        }
                    }
                    acc(&mut grads, &nodes, *a, dx);
                }
                Op::SumCols(a) => {
                    let (rows, cols) = val(a).shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let g = gout.get(r, 0);
                        dx.row_mut(r).iter_mut().for_each(|d| *d = g);
                    }
                    acc(&mut grads, &nodes, *a, dx);
                }
                Op::SumAll(a) => {
                    let (rows, cols) = val(a).shape();
                    acc(&mut grads, &nodes, *a, Matrix::filled(rows, cols, gout.item()));
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = val(a).shape();
                    let len = gout.cols();
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        dx.row_mut(r)[*start..start + len].copy_from_slice(gout.row(r));
                    }
                    acc(&mut grads, &nodes, *a, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = val(p).cols();
                        if nodes[p.0].needs_grad {
                            acc(&mut grads, &nodes, *p, gout.slice_cols(off, w));
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = val(p).shape();
                        if nodes[p.0].needs_grad {
                            let d = gout.data()[off * c..(off + r) * c].to_vec();
                            acc(&mut grads, &nodes, *p, Matrix::from_vec(r, c, d));
                        }
                        off += r;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let (rows, cols) = val(a).shape();
                    let mut dx = Matrix::zeros(rows, cols);
                    for (k, &src) in idx.iter().enumerate() {
                        for (d, g) in dx.row_mut(src).iter_mut().zip(gout.row(k)) {
                            *d += g;
                        }
                    }
                    acc(&mut grads, &nodes, *a, dx);
                }
                Op::Reshape(a) => {
                    let (rows, cols) = val(a).shape();
                    acc(&mut grads, &nodes, *a, Matrix::from_vec(rows, cols, gout.into_vec()));
                }
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Gradients { nodes: grads, params }
    }
}

fn broadcast_row(x: &Matrix, r: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(r.shape(), (1, x.cols()), "row broadcast shape mismatch");
    let mut out = x.clone();
    let rv = r.row(0);
    for i in 0..out.rows() {
        for (o, &q) in out.row_mut(i).iter_mut().zip(rv) {
            *o = f(*o, q);
        }
    }
    out
}

fn broadcast_col(x: &Matrix, c: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(c.shape(), (x.rows(), 1), "column broadcast shape mismatch");
    let mut out = x.clone();
    for i in 0..out.rows() {
        let q = c.get(i, 0);
        for o in out.row_mut(i) {
            *o = f(*o, q);
        }
    }
    out
}

fn col_sums(m: &Matrix) -> Matrix {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    Matrix::row_vector(out)
}

fn row_sums(m: &Matrix) -> Matrix {
    Matrix::col_vector((0..m.rows()).map(|r| m.row(r).iter().sum()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(loss)/d(param) for a closure building the
    /// loss from a single parameter.
    fn check(shape: (usize, usize), seed: u64, build: impl Fn(&Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Matrix::randn(shape.0, shape.1, 1.0, &mut rng);
        let mut store = ParamStore::new();
        let id = store.add("x", x0.clone());
        let g = Graph::new();
        let x = g.param(&store, id);
        let loss = build(&g, x);
        let grads = g.backward(loss);
        let analytic = grads.param(id).unwrap().clone();
        let h = 1e-6;
        for k in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xm = x0.clone();
                xm.data_mut()[k] += delta;
                let g = Graph::new();
                let x = g.constant(xm);
                let l = build(&g, x);
                let v = g.value(l).item();
                v
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.data()[k];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "coord {k}: fd {fd} vs analytic {an}");
        }
    }

    fn weights(g: &Graph, r: usize, c: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        g.constant(Matrix::randn(r, c, 1.0, &mut rng))
    }

    #[test]
    fn matmul_family() {
        check((3, 4), 1, |g, x| {
            let w = weights(g, 4, 2, 9);
            let y = g.matmul(x, w);
            let z = g.matmul_t(y, w);
            let z = g.add(z, g.transpose(g.matmul_t(w, y)));
            g.sum_all(g.square(z))
        });
    }

    #[test]
    fn grouped_products() {
        check((6, 3), 2, |g, x| {
            let k = weights(g, 4, 3, 5);
            let v = weights(g, 4, 2, 6);
            let s = g.grouped_matmul_t(x, k, 2);
            let p = g.softmax_rows(s);
            let o = g.grouped_matmul(p, v, 2);
            g.sum_all(g.tanh(o))
        });
        check((4, 3), 3, |g, x| {
            let q = weights(g, 6, 3, 7);
            let s = g.grouped_matmul_t(q, x, 2);
            let o = g.grouped_matmul(s, x, 2);
            g.sum_all(g.square(o))
        });
    }

    #[test]
    fn elementwise_and_broadcast() {
        check((3, 4), 3, |g, x| {
            let r = g.mean_rows(x);
            let c = g.sum_cols(x);
            let y = g.add_row(g.mul_row(x, r), r);
            let y = g.add_col(g.mul_col(y, c), c);
            let y = g.div(g.gelu(y), g.add_scalar(g.exp(g.scale(x, 0.1)), 1.0));
            let s = g.slice_cols(y, 1, 2);
            let s = g.mul_scalar_var(s, g.sum_all(g.slice_cols(x, 0, 1)));
            g.sum_all(g.relu(g.sub(s, g.tanh(g.slice_cols(x, 2, 2)))))
        });
    }

    #[test]
    fn normalizers() {
        check((3, 5), 4, |g, x| {
            let y = g.layer_norm_rows(x, 1e-5);
            let w = weights(g, 3, 5, 11);
            let l = g.log_softmax_rows(g.mul(y, w));
            let sm = g.softmax_rows(x);
            g.add(g.sum_all(g.mul(l, w)), g.sum_all(g.log(g.sqrt(g.add_scalar(g.square(sm), 1.0)))))
        });
    }

    #[test]
    fn structural_ops() {
        check((4, 3), 5, |g, x| {
            let a = g.gather_rows(x, &[3, 0, 0, 2]);
            let b = g.concat_cols(&[a, x]);
            let c = g.concat_rows(&[b, b]);
            let d = g.reshape(c, 6, 8);
            let w = weights(g, 6, 8, 3);
            g.sum_all(g.mul(d, w))
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::filled(2, 2, 1.0));
        let frozen = store.add("frozen", Matrix::filled(2, 2, 3.0));
        store.set_trainable(frozen, false);
        let g = Graph::new();
        let w = g.param(&store, id);
        let f = g.param(&store, frozen);
        let loss = g.sum_all(g.mul(w, f));
        let grads = g.backward(loss);
        assert_eq!(grads.param(id).unwrap(), &Matrix::filled(2, 2, 3.0));
        assert!(grads.param(frozen).is_none());
        assert!(!g.requires_grad(f));
    }

    #[test]
    fn param_reuse_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::scalar(2.0));
        let g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        let loss = g.mul(a, b);
        let grads = g.backward(loss);
        assert_eq!(grads.param(id).unwrap().item(), 4.0);
    }
}
