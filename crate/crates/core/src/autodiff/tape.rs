//! Tensor-level reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value to a [`Tape`].
//! Nodes only ever reference earlier nodes, so the tape is a topological
//! order of the computation and [`Tape::backward`] is a single reverse sweep.
//! Forward values are checked for finiteness as they are produced.

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization direction of a softmax node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Each row sums to one.
    Rows,
    /// Each column sums to one.
    Cols,
}

/// Identifies the backward rule of a node kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackwardRule {
    MatVec,
    MatMul,
    MatMulNt,
    Transpose,
    Add,
    Mul,
    Scale,
    AddRowVector,
    ScaleRows,
    OuterSum,
    Outer,
    ConcatCols,
    Relu,
    Softmax,
    Sum,
    Dot,
    CrossEntropy,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatVec(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowVector(Var, Var),
    ScaleRows(Var, Var),
    OuterSum(Var, Var),
    Outer(Var, Var),
    ConcatCols(Vec<Var>),
    Relu(Var),
    Softmax {
        input: Var,
        axis: Axis,
        skip_diagonal: bool,
    },
    Sum(Var),
    Dot(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
}

impl Op {
    fn rule(&self) -> Option<BackwardRule> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatVec(..) => BackwardRule::MatVec,
            Op::MatMul(..) => BackwardRule::MatMul,
            Op::MatMulNt(..) => BackwardRule::MatMulNt,
            Op::Transpose(..) => BackwardRule::Transpose,
            Op::Add(..) => BackwardRule::Add,
            Op::Mul(..) => BackwardRule::Mul,
            Op::Scale(..) => BackwardRule::Scale,
            Op::AddRowVector(..) => BackwardRule::AddRowVector,
            Op::ScaleRows(..) => BackwardRule::ScaleRows,
            Op::OuterSum(..) => BackwardRule::OuterSum,
            Op::Outer(..) => BackwardRule::Outer,
            Op::ConcatCols(..) => BackwardRule::ConcatCols,
            Op::Relu(..) => BackwardRule::Relu,
            Op::Softmax { .. } => BackwardRule::Softmax,
            Op::Sum(..) => BackwardRule::Sum,
            Op::Dot(..) => BackwardRule::Dot,
            Op::CrossEntropy { .. } => BackwardRule::CrossEntropy,
        })
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward computation. Confined to a single thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<BackwardRule>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when `v` does not
    /// influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.adjoints[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn mat(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| Error::dim(op, format!("expected a matrix, got shape {:?}", t.shape())))
}

fn vec_len(t: &Tensor, op: &'static str) -> Result<usize> {
    match t.shape() {
        [n] => Ok(*n),
        s => Err(Error::dim(op, format!("expected a vector, got shape {:?}", s))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// `out[m×n] = a[m×k] · b[k×n]`
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `out[k×n] = a[m×k]ᵀ · b[m×n]`
fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

/// Index lists of the groups a softmax normalizes over.
fn softmax_groups(rows: usize, cols: usize, axis: Axis, skip_diagonal: bool) -> Vec<Vec<usize>> {
    match axis {
        Axis::Rows => (0..rows)
            .map(|r| {
                (0..cols)
                    .filter(|&c| !(skip_diagonal && cols > 1 && c == r))
                    .map(|c| r * cols + c)
                    .collect()
            })
            .collect(),
        Axis::Cols => (0..cols)
            .map(|c| {
                (0..rows)
                    .filter(|&r| !(skip_diagonal && rows > 1 && r == c))
                    .map(|r| r * cols + c)
                    .collect()
            })
            .collect(),
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test fixture: scales the input adjoints produced by `rule` by 1.5,
    /// breaking gradient correctness on purpose.
    pub fn inject_fault(&mut self, rule: BackwardRule) {
        self.fault = Some(rule);
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

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor (parameter or data).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, n) = mat(self.value(w), "matvec")?;
        let len = vec_len(self.value(x), "matvec")?;
        if len != n {
            return Err(Error::dim(
                "matvec",
                format!("matrix {}x{} times vector of {}", m, n, len),
            ));
        }
        let out = gemm(self.value(w).data(), self.value(x).data(), m, n, 1);
        self.push(Tensor::vector(out), Op::MatVec(w, x), "matvec")
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = mat(self.value(a), "matmul")?;
        let (k2, n) = mat(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("{}x{} times {}x{}", m, k, k2, n)));
        }
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), "matmul")
    }

    /// `a[m×k] · b[n×k]ᵀ`, i.e. every row of `a` projected by `b`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = mat(self.value(a), "matmul_nt")?;
        let (n, k2) = mat(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("{}x{} times ({}x{})^T", m, k, n, k2)));
        }
        let out = gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = mat(self.value(a), "transpose")?;
        let out = transpose(self.value(a).data(), r, c);
        self.push(Tensor::matrix(c, r, out)?, Op::Transpose(a), "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Add(a, b), "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    /// Adds `v[d]` to every row of `m[N×d]`.
    pub fn add_row_vector(&mut self, m: Var, v: Var) -> Result<Var> {
        let (rows, cols) = mat(self.value(m), "add_row_vector")?;
        let len = vec_len(self.value(v), "add_row_vector")?;
        if len != cols {
            return Err(Error::dim(
                "add_row_vector",
                format!("{} columns, vector of {}", cols, len),
            ));
        }
        let vd = self.value(v).data();
        let out: Vec<f64> = self
            .value(m)
            .data()
            .iter()
            .enumerate()
            .map(|(idx, x)| x + vd[idx % cols])
            .collect();
        self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::AddRowVector(m, v),
            "add_row_vector",
        )
    }

    /// `out[j][i] = m[j][i] · v[j]`
    pub fn scale_rows(&mut self, m: Var, v: Var) -> Result<Var> {
        let (rows, cols) = mat(self.value(m), "scale_rows")?;
        let len = vec_len(self.value(v), "scale_rows")?;
        if len != rows {
            return Err(Error::dim("scale_rows", format!("{} rows, vector of {}", rows, len)));
        }
        let vd = self.value(v).data();
        let out: Vec<f64> = self
            .value(m)
            .data()
            .iter()
            .enumerate()
            .map(|(idx, x)| x * vd[idx / cols])
            .collect();
        self.push(Tensor::matrix(rows, cols, out)?, Op::ScaleRows(m, v), "scale_rows")
    }

    /// `out[j][i] = a[j] + b[i]`
    pub fn outer_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = vec_len(self.value(a), "outer_sum")?;
        let m = vec_len(self.value(b), "outer_sum")?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = (0..n * m).map(|idx| ad[idx / m] + bd[idx % m]).collect();
        self.push(Tensor::matrix(n, m, out)?, Op::OuterSum(a, b), "outer_sum")
    }

    /// `out[j][i] = a[j] · b[i]`
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = vec_len(self.value(a), "outer")?;
        let m = vec_len(self.value(b), "outer")?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = (0..n * m).map(|idx| ad[idx / m] * bd[idx % m]).collect();
        self.push(Tensor::matrix(n, m, out)?, Op::Outer(a, b), "outer")
    }

    /// Concatenates matrices with equal row counts along the columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols", "nothing to concatenate"));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(mat(self.value(p), "concat_cols")?);
        }
        let rows = dims[0].0;
        if dims.iter().any(|&(r, _)| r != rows) {
            return Err(Error::dim("concat_cols", format!("row counts differ: {:?}", dims)));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(
            Tensor::matrix(rows, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            "concat_cols",
        )
    }

    /// Elementwise `max{0, x}`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a), "relu")
    }

    /// Softmax along `axis`, with row-max subtraction. With `skip_diagonal`
    /// the diagonal entry of each group receives weight zero, unless it is the
    /// only entry of its group.
    pub fn softmax(&mut self, a: Var, axis: Axis, skip_diagonal: bool) -> Result<Var> {
        let (rows, cols) = mat(self.value(a), "softmax")?;
        let x = self.value(a).data();
        let mut out = vec![0.0; rows * cols];
        for group in softmax_groups(rows, cols, axis, skip_diagonal) {
            let max = group.iter().map(|&i| x[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &i in &group {
                let e = (x[i] - max).exp();
                out[i] = e;
                total += e;
            }
            for &i in &group {
                out[i] /= total;
            }
        }
        self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::Softmax {
                input: a,
                axis,
                skip_diagonal,
            },
            "softmax",
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax(a, Axis::Rows, false)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "dot")?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        self.push(Tensor::scalar(s), Op::Dot(a, b), "dot")
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = mat(self.value(logits), "cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} rows of logits, {} targets", rows, targets.len()),
            ));
        }
        if rows == 0 {
            return Err(Error::dim("cross_entropy", "no rows"));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::dim(
                "cross_entropy",
                format!("target {} out of {} classes", t, cols),
            ));
        }
        let z = self.value(logits);
        let total: f64 = (0..rows)
            .map(|r| {
                let row = z.row(r);
                log_sum_exp(row.iter().copied()) - row[targets[r]]
            })
            .sum();
        self.push(
            Tensor::scalar(total / rows as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            "cross_entropy",
        )
    }

    /// Sign pattern of every ReLU input on the tape. Two evaluations with the
    /// same pattern lie on the same smooth piece of the function.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.nodes[a.0].value.data().iter().map(|&x| x > 0.0))
            .collect()
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::filled(root_value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut contributions = self.node_backward(node, &g);
            if self.fault.is_some() && self.fault == node.op.rule() {
                for (_, t) in &mut contributions {
                    t.scale_assign(1.5);
                }
            }
            for (parent, t) in contributions {
                match &mut adj[parent.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
            adj[idx] = Some(g);
        }

        adj.resize(self.nodes.len(), None);
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatVec(w, x) => {
                let (m, n) = val(*w).dims2().unwrap();
                let gw = gemm(gd, val(*x).data(), m, 1, n);
                let gx = gemm_tn(val(*w).data(), gd, m, n, 1);
                vec![(*w, Tensor::matrix(m, n, gw).unwrap()), (*x, Tensor::vector(gx))]
            }
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let (_, n) = val(*b).dims2().unwrap();
                let ga = gemm_nt(gd, val(*b).data(), m, n, k);
                let gb = gemm_tn(val(*a).data(), gd, m, k, n);
                vec![
                    (*a, Tensor::matrix(m, k, ga).unwrap()),
                    (*b, Tensor::matrix(k, n, gb).unwrap()),
                ]
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let (n, _) = val(*b).dims2().unwrap();
                let ga = gemm(gd, val(*b).data(), m, n, k);
                let gb = gemm_tn(gd, val(*a).data(), m, n, k);
                vec![
                    (*a, Tensor::matrix(m, k, ga).unwrap()),
                    (*b, Tensor::matrix(n, k, gb).unwrap()),
                ]
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2().unwrap();
                vec![(*a, Tensor::matrix(r, c, transpose(gd, c, r)).unwrap())]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    gd.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect(),
                )
                .unwrap();
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    gd.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect(),
                )
                .unwrap();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
            Op::AddRowVector(m, v) => {
                let (_, cols) = val(*m).dims2().unwrap();
                let mut gv = vec![0.0; cols];
                for (idx, x) in gd.iter().enumerate() {
                    gv[idx % cols] += x;
                }
                vec![(*m, g.clone()), (*v, Tensor::vector(gv))]
            }
            Op::ScaleRows(m, v) => {
                let (rows, cols) = val(*m).dims2().unwrap();
                let (md, vd) = (val(*m).data(), val(*v).data());
                let gm: Vec<f64> = gd.iter().enumerate().map(|(idx, x)| x * vd[idx / cols]).collect();
                let mut gv = vec![0.0; rows];
                for (idx, x) in gd.iter().enumerate() {
                    gv[idx / cols] += x * md[idx];
                }
                vec![(*m, Tensor::matrix(rows, cols, gm).unwrap()), (*v, Tensor::vector(gv))]
            }
            Op::OuterSum(a, b) => {
                let (n, m) = g.dims2().unwrap();
                let mut ga = vec![0.0; n];
                let mut gb = vec![0.0; m];
                for (idx, x) in gd.iter().enumerate() {
                    ga[idx / m] += x;
                    gb[idx % m] += x;
                }
                vec![(*a, Tensor::vector(ga)), (*b, Tensor::vector(gb))]
            }
            Op::Outer(a, b) => {
                let (n, m) = g.dims2().unwrap();
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let mut ga = vec![0.0; n];
                let mut gb = vec![0.0; m];
                for (idx, x) in gd.iter().enumerate() {
                    ga[idx / m] += x * bd[idx % m];
                    gb[idx % m] += x * ad[idx / m];
                }
                vec![(*a, Tensor::vector(ga)), (*b, Tensor::vector(gb))]
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = g.dims2().unwrap();
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let (_, c) = val(p).dims2().unwrap();
                        let mut out = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            out.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                        }
                        offset += c;
                        (p, Tensor::matrix(rows, c, out).unwrap())
                    })
                    .collect()
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                let ga: Vec<f64> = gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                vec![(*a, Tensor::new(g.shape().to_vec(), ga).unwrap())]
            }
            Op::Softmax {
                input,
                axis,
                skip_diagonal,
            } => {
                let y = node.value.data();
                let (rows, cols) = node.value.dims2().unwrap();
                let mut ga = vec![0.0; rows * cols];
                for group in softmax_groups(rows, cols, *axis, *skip_diagonal) {
                    let inner: f64 = group.iter().map(|&i| gd[i] * y[i]).sum();
                    for &i in &group {
                        ga[i] = y[i] * (gd[i] - inner);
                    }
                }
                vec![(*input, Tensor::matrix(rows, cols, ga).unwrap())]
            }
            Op::Sum(a) => vec![(*a, Tensor::filled(val(*a).shape(), g.item()))],
            Op::Dot(a, b) => {
                let s = g.item();
                vec![(*a, val(*b).map(|x| x * s)), (*b, val(*a).map(|x| x * s))]
            }
            Op::CrossEntropy { logits, targets } => {
                let z = val(*logits);
                let (rows, cols) = z.dims2().unwrap();
                let s = g.item() / rows as f64;
                let mut gz = vec![0.0; rows * cols];
                for r in 0..rows {
                    let row = z.row(r);
                    let lse = log_sum_exp(row.iter().copied());
                    for c in 0..cols {
                        let p = (row[c] - lse).exp();
                        let t = if c == targets[r] { 1.0 } else { 0.0 };
                        gz[r * cols + c] = s * (p - t);
                    }
                }
                vec![(*logits, Tensor::matrix(rows, cols, gz).unwrap())]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(t: &mut Tape, shape: &[usize], data: &[f64]) -> Var {
        t.leaf(Tensor::new(shape.to_vec(), data.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn matvec_identity_and_zero() {
        let mut t = Tape::new();
        let i = t.leaf(Tensor::identity(2)).unwrap();
        let z = leaf(&mut t, &[2, 2], &[0.0; 4]);
        let x = leaf(&mut t, &[2], &[3.0, -1.0]);
        let y = t.matvec(i, x).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, -1.0]);
        let y = t.matvec(z, x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn matvec_hand_product() {
        let mut t = Tape::new();
        let w = leaf(&mut t, &[2, 2], &[1.0, 2.0, 0.0, 1.0]);
        let x = leaf(&mut t, &[2], &[1.0, 1.0]);
        let y = t.matvec(w, x).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 1.0]);
    }

    #[test]
    fn matvec_shape_mismatch() {
        let mut t = Tape::new();
        let w = leaf(&mut t, &[2, 3], &[0.0; 6]);
        let x = leaf(&mut t, &[2], &[1.0, 1.0]);
        assert!(matches!(t.matvec(w, x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn relu_cases() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[3], &[-1.0, 0.0, 2.0]);
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let x = leaf(&mut t, &[3], &[-1.0, -5.0, -0.1]);
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);
        let x = leaf(&mut t, &[1], &[0.5]);
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5]);
    }

    #[test]
    fn softmax_rows_examples() {
        let mut t = Tape::new();
        let m = leaf(&mut t, &[2, 2], &[0.0, 0.0, 0.0, 1.0]);
        let y = t.softmax_rows(m).unwrap();
        let v = t.value(y).data();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] - 0.26894).abs() < 1e-5);
        assert!((v[3] - 0.73106).abs() < 1e-5);

        let c = 123.4;
        let m = leaf(&mut t, &[3, 3], &[c; 9]);
        let y = t.softmax_rows(m).unwrap();
        for &p in t.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let mut t = Tape::new();
        let m = leaf(&mut t, &[1, 3], &[1000.0, -1000.0, 999.0]);
        let y = t.softmax_rows(m).unwrap();
        assert!(t.value(y).is_finite());
    }

    #[test]
    fn softmax_skip_diagonal() {
        let mut t = Tape::new();
        let m = leaf(&mut t, &[2, 2], &[5.0, 0.0, 0.0, 5.0]);
        let y = t.softmax(m, Axis::Rows, true).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 1.0, 1.0, 0.0]);
        let one = leaf(&mut t, &[1, 1], &[3.0]);
        let y = t.softmax(one, Axis::Rows, true).unwrap();
        assert_eq!(t.value(y).data(), &[1.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]);
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_self_dot() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], &[1.0, 2.0]);
        let s = t.dot(x, x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1], &[-1.0]);
        let w = leaf(&mut t, &[1], &[0.7]);
        let r = t.relu(x).unwrap();
        let s = t.dot(r, w).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(w).data(), &[0.0]);
        assert_eq!(g.wrt(x).data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], &[1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_values_rejected() {
        let mut t = Tape::new();
        assert!(t.leaf(Tensor::vector(vec![f64::NAN])).is_err());
        let x = leaf(&mut t, &[1], &[1e300]);
        assert!(matches!(t.dot(x, x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln2() {
        let mut t = Tape::new();
        let z = leaf(&mut t, &[3, 2], &[0.0; 6]);
        let l = t.cross_entropy(z, &[0, 1, 1]).unwrap();
        assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
