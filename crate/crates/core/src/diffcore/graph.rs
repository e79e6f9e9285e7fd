use std::collections::{BTreeMap, HashMap};

use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};
use super::{DiffError, ParameterStore};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for a node whose forward value is computed outside the graph.
///
/// Returns one entry per input; `None` means no gradient flows to that input.
pub trait CustomGrad {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    Norm(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    StopGrad,
    GatherRows(Var, Vec<usize>),
    Custom(Vec<Var>, Box<dyn CustomGrad>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run computation graph: every op evaluates eagerly and is
/// appended to the tape, so node order is a topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to any node that required one. Nodes the root
    /// does not depend on report `None`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::ShapeMismatch { op, detail }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(s) => s.add_assign(&t),
        None => *slot = Some(t),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    /// Value of `root`. The graph is evaluated eagerly, so this is a lookup.
    pub fn forward(&self, root: Var) -> &Tensor {
        self.value(root)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn require_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize), DiffError> {
        let t = &self.nodes[v.0].value;
        if !t.is_matrix() {
            return Err(shape_err(op, format!("expected rank-2 input, got {:?}", t.shape())));
        }
        Ok((t.rows(), t.cols()))
    }

    fn require_same(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize), DiffError> {
        let sa = self.require_matrix(op, a)?;
        let sb = self.require_matrix(op, b)?;
        if sa != sb {
            return Err(shape_err(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(sa)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var, DiffError> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Unnamed leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Result<Var, DiffError> {
        self.push("variable", t, Op::Leaf, true)
    }

    /// Leaf bound to a named parameter. Repeated lookups share one node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var, DiffError> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let value = store.value(name).ok_or_else(|| DiffError::UnknownParam(name.to_string()))?.clone();
        let v = self.push("param", value, Op::Leaf, true)?;
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_vars(&self) -> &[(String, Var)] {
        &self.params
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        let (r, c) = self.require_same(name, a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(name, Tensor::matrix(r, c, data)?, op, needs)
    }

    fn map_op(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, DiffError> {
        self.require_matrix(name, a)?;
        let value = self.value(a).map(f);
        let needs = self.needs(a);
        self.push(name, value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_op("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `x [r,c] + row [1,c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, DiffError> {
        let (r, c) = self.require_matrix("add_row", x)?;
        let rs = self.require_matrix("add_row", row)?;
        if rs != (1, c) {
            return Err(shape_err("add_row", format!("row {:?} for input [{}, {}]", rs, r, c)));
        }
        let rowv = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for i in 0..r {
            for (o, b) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(&rowv) {
                *o += b;
            }
        }
        let needs = self.needs(x) || self.needs(row);
        self.push("add_row", out, Op::AddRow(x, row), needs)
    }

    /// `x [r,c] * col [r,1]` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var, DiffError> {
        let (r, c) = self.require_matrix("mul_col", x)?;
        let cs = self.require_matrix("mul_col", col)?;
        if cs != (r, 1) {
            return Err(shape_err("mul_col", format!("column {:?} for input [{}, {}]", cs, r, c)));
        }
        let colv = self.value(col).data().to_vec();
        let mut out = self.value(x).clone();
        for i in 0..r {
            for o in &mut out.data_mut()[i * c..(i + 1) * c] {
                *o *= colv[i];
            }
        }
        let needs = self.needs(x) || self.needs(col);
        self.push("mul_col", out, Op::MulCol(x, col), needs)
    }

    /// `x * s` with `s` a `[1,1]` node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, DiffError> {
        self.require_matrix("mul_scalar", x)?;
        if self.shape(s) != (1, 1) {
            return Err(shape_err("mul_scalar", format!("scalar operand has shape {:?}", self.value(s).shape())));
        }
        let k = self.value(s).item();
        let out = self.value(x).map(|v| v * k);
        let needs = self.needs(x) || self.needs(s);
        self.push("mul_scalar", out, Op::MulScalar(x, s), needs)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var, DiffError> {
        self.map_op("scale", x, |v| v * k, Op::Scale(x, k))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, DiffError> {
        self.scale(x, -1.0)
    }

    /// `x + k` for a constant `k`.
    pub fn offset(&mut self, x: Var, k: f64) -> Result<Var, DiffError> {
        self.map_op("offset", x, |v| v + k, Op::Offset(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.require_matrix("matmul", a)?;
        let (k2, n) = self.require_matrix("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{}, {}] x [{}, {}]", m, k, k2, n)));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::matrix(m, n, data)?, Op::MatMul(a, b), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        self.require_matrix("transpose", a)?;
        let out = self.value(a).transpose();
        let needs = self.needs(a);
        self.push("transpose", out, Op::Transpose(a), needs)
    }

    /// Row-major reshape to `[rows, cols]`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, DiffError> {
        let t = self.value(a);
        if t.len() != rows * cols {
            return Err(shape_err("reshape", format!("{:?} to [{}, {}]", t.shape(), rows, cols)));
        }
        let out = t.reshaped(rows, cols)?;
        let needs = self.needs(a);
        self.push("reshape", out, Op::Reshape(a), needs)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, DiffError> {
        self.map_op("softplus", x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, DiffError> {
        self.map_op("exp", x, f64::exp, Op::Exp(x))
    }

    /// Natural logarithm.
    pub fn ln(&mut self, x: Var) -> Result<Var, DiffError> {
        self.map_op("ln", x, f64::ln, Op::Ln(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, DiffError> {
        self.map_op("sqrt", x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var, DiffError> {
        self.map_op("square", x, |v| v * v, Op::Square(x))
    }

    /// Sum of all entries, `[1,1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let m = t.sum() / t.len() as f64;
        let needs = self.needs(x);
        self.push("mean", Tensor::scalar(m), Op::Mean(x), needs)
    }

    /// Per-row sum, `[r,1]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var, DiffError> {
        let (r, _) = self.require_matrix("sum_rows", x)?;
        let t = self.value(x);
        let data = (0..r).map(|i| t.row_slice(i).iter().sum()).collect();
        let needs = self.needs(x);
        self.push("sum_rows", Tensor::matrix(r, 1, data)?, Op::SumRows(x), needs)
    }

    /// Per-column sum, `[1,c]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var, DiffError> {
        let (r, c) = self.require_matrix("sum_cols", x)?;
        let t = self.value(x);
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (d, v) in data.iter_mut().zip(t.row_slice(i)) {
                *d += v;
            }
        }
        let needs = self.needs(x);
        self.push("sum_cols", Tensor::matrix(1, c, data)?, Op::SumCols(x), needs)
    }

    /// Euclidean (Frobenius) norm of all entries, `[1,1]`.
    pub fn norm(&mut self, x: Var) -> Result<Var, DiffError> {
        let n = self.value(x).sq_norm().sqrt();
        let needs = self.needs(x);
        self.push("norm", Tensor::scalar(n), Op::Norm(x), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs".into()));
        }
        let (r, _) = self.require_matrix("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.require_matrix("concat_cols", p)?;
            if pr != r {
                return Err(shape_err("concat_cols", format!("row count {} vs {}", pr, r)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push("concat_cols", Tensor::matrix(r, total, data)?, Op::ConcatCols(parts.to_vec()), needs)
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let (r, c) = self.require_matrix("slice_cols", x)?;
        if start > end || end > c {
            return Err(shape_err("slice_cols", format!("range {}..{} of {} columns", start, end, c)));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&t.row_slice(i)[start..end]);
        }
        let needs = self.needs(x);
        self.push("slice_cols", Tensor::matrix(r, end - start, data)?, Op::SliceCols(x, start), needs)
    }

    /// `sg(x)`: same value, no gradient.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var, DiffError> {
        let value = self.value(x).clone();
        self.push("stop_gradient", value, Op::StopGrad, false)
    }

    /// Rows of `table` selected by `indices`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, DiffError> {
        let (r, c) = self.require_matrix("gather_rows", table)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("index {} out of {} rows", bad, r)));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(t.row_slice(i));
        }
        let needs = self.needs(table);
        self.push(
            "gather_rows",
            Tensor::matrix(indices.len(), c, data)?,
            Op::GatherRows(table, indices.to_vec()),
            needs,
        )
    }

    /// Node whose value was computed by the caller; `grad` supplies the
    /// vector-Jacobian product for each input.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, grad: Box<dyn CustomGrad>) -> Result<Var, DiffError> {
        let needs = inputs.iter().any(|&i| self.needs(i));
        let name = grad.name();
        self.push(name, value, Op::Custom(inputs.to_vec(), grad), needs)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, DiffError> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(DiffError::NonScalarRoot { shape: rv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(rv.shape().to_vec(), vec![1.0])?);

        for i in (0..=root.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, g, lower);
        }

        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads[v.0].clone().unwrap_or_else(|| {
                let t = self.value(*v);
                Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).expect("shape of existing tensor")
            });
            params.insert(name.clone(), g);
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn propagate(&self, node: &Node, g: &Tensor, lower: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor| {
            if self.nodes[v.0].needs_grad {
                accumulate(&mut lower[v.0], t);
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                send(*a, zip(g, val(*b), |gv, bv| gv * bv));
                send(*b, zip(g, val(*a), |gv, av| gv * av));
            }
            Op::Div(a, b) => {
                send(*a, zip(g, val(*b), |gv, bv| gv / bv));
                let ga = zip(g, val(*a), |gv, av| gv * av);
                send(*b, zip(&ga, val(*b), |t, bv| -t / (bv * bv)));
            }
            Op::AddRow(x, row) => {
                send(*x, g.clone());
                send(*row, col_sums(g));
            }
            Op::MulCol(x, col) => {
                let (r, c) = (g.rows(), g.cols());
                let colv = val(*col).data();
                let mut gx = g.clone();
                for i in 0..r {
                    for o in &mut gx.data_mut()[i * c..(i + 1) * c] {
                        *o *= colv[i];
                    }
                }
                send(*x, gx);
                let xv = val(*x);
                let gc: Vec<f64> = (0..r)
                    .map(|i| g.row_slice(i).iter().zip(xv.row_slice(i)).map(|(a, b)| a * b).sum())
                    .collect();
                send(*col, Tensor::matrix(r, 1, gc).expect("column shape"));
            }
            Op::MulScalar(x, s) => {
                let k = val(*s).item();
                send(*x, g.map(|v| v * k));
                let d: f64 = g.data().iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
                send(*s, Tensor::scalar(d));
            }
            Op::Scale(x, k) => send(*x, g.map(|v| v * k)),
            Op::Offset(x) => send(*x, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.nodes[a.0].needs_grad {
                    let ga = matmul_nt_raw(g.data(), bv.data(), m, n, k);
                    send(*a, Tensor::matrix(m, k, ga).expect("matmul grad shape"));
                }
                if self.nodes[b.0].needs_grad {
                    let gb = matmul_tn_raw(av.data(), g.data(), m, k, n);
                    send(*b, Tensor::matrix(k, n, gb).expect("matmul grad shape"));
                }
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                send(*a, Tensor::new(shape, g.data().to_vec()).expect("reshape grad"));
            }
            Op::Softplus(x) => send(*x, zip(g, val(*x), |gv, xv| gv * sigmoid(xv))),
            Op::Exp(x) => send(*x, zip(g, y, |gv, yv| gv * yv)),
            Op::Ln(x) => send(*x, zip(g, val(*x), |gv, xv| gv / xv)),
            Op::Sqrt(x) => send(*x, zip(g, y, |gv, yv| if yv > 0.0 { gv / (2.0 * yv) } else { 0.0 })),
            Op::Square(x) => send(*x, zip(g, val(*x), |gv, xv| 2.0 * gv * xv)),
            Op::Sum(x) => {
                let k = g.item();
                send(*x, val(*x).map(|_| k));
            }
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                let k = g.item() / n;
                send(*x, val(*x).map(|_| k));
            }
            Op::SumRows(x) => {
                let xv = val(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let mut out = Tensor::zeros(r, c);
                for i in 0..r {
                    let gi = g.data()[i];
                    for o in &mut out.data_mut()[i * c..(i + 1) * c] {
                        *o = gi;
                    }
                }
                send(*x, out);
            }
            Op::SumCols(x) => {
                let xv = val(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let mut out = Tensor::zeros(r, c);
                for i in 0..r {
                    out.data_mut()[i * c..(i + 1) * c].copy_from_slice(g.data());
                }
                send(*x, out);
            }
            Op::Norm(x) => {
                let n = y.item();
                let k = g.item();
                if n > 0.0 {
                    send(*x, val(*x).map(|v| k * v / n));
                }
            }
            Op::ConcatCols(parts) => {
                let r = g.rows();
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut data = Vec::with_capacity(r * w);
                    for i in 0..r {
                        data.extend_from_slice(&g.row_slice(i)[start..start + w]);
                    }
                    start += w;
                    send(p, Tensor::matrix(r, w, data).expect("concat grad"));
                }
            }
            Op::SliceCols(x, start) => {
                let xv = val(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let w = g.cols();
                let mut out = Tensor::zeros(r, c);
                for i in 0..r {
                    out.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row_slice(i));
                }
                send(*x, out);
            }
            Op::GatherRows(table, idx) => {
                let tv = val(*table);
                let (r, c) = (tv.rows(), tv.cols());
                let mut out = Tensor::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, gv) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row_slice(k)) {
                        *o += gv;
                    }
                }
                send(*table, out);
            }
            Op::Custom(inputs, rule) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let gs = rule.backward(&ins, y, g);
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        send(*v, gi);
                    }
                }
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip of equal shapes")
}

fn col_sums(g: &Tensor) -> Tensor {
    let (r, c) = (g.rows(), g.cols());
    let mut data = vec![0.0; c];
    for i in 0..r {
        for (d, v) in data.iter_mut().zip(g.row_slice(i)) {
            *d += v;
        }
    }
    Tensor::matrix(1, c, data).expect("row shape")
}
