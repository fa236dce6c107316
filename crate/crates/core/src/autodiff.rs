//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] is an append-only arena of eagerly evaluated nodes. Each
//! training step builds a fresh tape, runs one backward sweep from a scalar
//! loss, and reads gradients for the leaves it cares about. Matrices are
//! small (widths <= 64), so the op set favours clarity over blocking.
//!
//! Shape mismatches are programmer errors and panic; user-facing contracts
//! are enforced by the callers before touching the tape.

use ndarray::{s, Array2, Axis};

use crate::linalg::mat_inv;

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Neg(usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    SumAll(usize),
    MeanAll(usize),
    AddRowBroadcast(usize, usize),
    MulRowBroadcast(usize, usize),
    MulColBroadcast(usize, usize),
    DivColBroadcast(usize, usize),
    MulScalarVar(usize, usize),
    AddScalarVar(usize, usize),
    SliceCols(usize, usize, usize),
    SliceRows(usize, usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    MatInv(usize),
    DiagOf(usize),
    DiagMat(usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Append-only computation graph with eager values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adj: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v` (zeros if unused).
    pub fn wrt(&self, tape: &Tape, v: Var) -> Array2<f64> {
        match &self.adj[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.nodes[v.0].value.raw_dim()),
        }
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

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar payload of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.len(), 1, "scalar_value on non-scalar node");
        a[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, Op::Neg(a.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(v, Op::Div(a.0, b.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose(a.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| s * x);
        self.push(v, Op::Scale(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + s);
        self.push(v, Op::AddScalar(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn sigmoid_op(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn softplus_op(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(softplus);
        self.push(v, Op::Softplus(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.push(v, Op::Ln(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        self.push(v, Op::Abs(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(v, Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum() / n);
        self.push(v, Op::MeanAll(a.0))
    }

    /// X (m,n) + r (1,n), r added to every row.
    pub fn add_row_broadcast(&mut self, x: Var, r: Var) -> Var {
        let rv = self.nodes[r.0].value.row(0).to_owned();
        let v = &self.nodes[x.0].value + &rv;
        self.push(v, Op::AddRowBroadcast(x.0, r.0))
    }

    /// X (m,n) * r (1,n) elementwise per row.
    pub fn mul_row_broadcast(&mut self, x: Var, r: Var) -> Var {
        let rv = self.nodes[r.0].value.row(0).to_owned();
        let v = &self.nodes[x.0].value * &rv;
        self.push(v, Op::MulRowBroadcast(x.0, r.0))
    }

    /// X (m,n) * c (m,1) elementwise per column.
    pub fn mul_col_broadcast(&mut self, x: Var, c: Var) -> Var {
        let cv = self.nodes[c.0].value.column(0).to_owned();
        let mut v = self.nodes[x.0].value.clone();
        for (mut row, s) in v.rows_mut().into_iter().zip(cv.iter()) {
            row.mapv_inplace(|x| x * s);
        }
        self.push(v, Op::MulColBroadcast(x.0, c.0))
    }

    /// X (m,n) / c (m,1) elementwise per column.
    pub fn div_col_broadcast(&mut self, x: Var, c: Var) -> Var {
        let cv = self.nodes[c.0].value.column(0).to_owned();
        let mut v = self.nodes[x.0].value.clone();
        for (mut row, s) in v.rows_mut().into_iter().zip(cv.iter()) {
            row.mapv_inplace(|x| x / s);
        }
        self.push(v, Op::DivColBroadcast(x.0, c.0))
    }

    /// X * s elementwise where s is a (1,1) node.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let v = self.nodes[x.0].value.mapv(|a| a * sv);
        self.push(v, Op::MulScalarVar(x.0, s.0))
    }

    /// X + s elementwise where s is a (1,1) node.
    pub fn add_scalar_var(&mut self, x: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let v = self.nodes[x.0].value.mapv(|a| a + sv);
        self.push(v, Op::AddScalarVar(x.0, s.0))
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let v = self.nodes[a.0].value.slice(s![.., c0..c1]).to_owned();
        self.push(v, Op::SliceCols(a.0, c0, c1))
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let v = self.nodes[a.0].value.slice(s![r0..r1, ..]).to_owned();
        self.push(v, Op::SliceRows(a.0, r0, r1))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.nodes[a.0].value.iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("reshape size mismatch");
        self.push(v, Op::Reshape(a.0))
    }

    /// Inverse of a square matrix. Panics on exactly singular input; callers
    /// gate ill-conditioned matrices before building tape nodes.
    pub fn mat_inv_op(&mut self, a: Var) -> Var {
        let v = mat_inv(&self.nodes[a.0].value).expect("tape mat_inv on singular matrix");
        self.push(v, Op::MatInv(a.0))
    }

    /// Diagonal of a square matrix as a (d,1) column.
    pub fn diag_of(&mut self, a: Var) -> Var {
        let m = &self.nodes[a.0].value;
        let d = m.nrows();
        let mut v = Array2::zeros((d, 1));
        for i in 0..d {
            v[[i, 0]] = m[[i, i]];
        }
        self.push(v, Op::DiagOf(a.0))
    }

    /// (d,1) column to a diagonal matrix.
    pub fn diag_mat(&mut self, a: Var) -> Var {
        let c = &self.nodes[a.0].value;
        let d = c.nrows();
        let mut v = Array2::zeros((d, d));
        for i in 0..d {
            v[[i, i]] = c[[i, 0]];
        }
        self.push(v, Op::DiagMat(a.0))
    }

    /// Sum of several scalars (or same-shape nodes).
    pub fn add_many(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for p in &parts[1..] {
            acc = self.add(acc, *p);
        }
        acc
    }

    /// tr(exp(A .* A)) - d via an 18-term Taylor series. Built from tape ops
    /// so the gradient flows; exact for nilpotent supports.
    pub fn acyclicity(&mut self, a: Var) -> Var {
        let d = self.value(a).nrows();
        assert_eq!(self.value(a).ncols(), d, "acyclicity on non-square matrix");
        let sq = self.mul(a, a);
        let eye = self.leaf(Array2::eye(d));
        let mut total = eye; // running sum of the series
        let mut term = eye;
        for k in 1..=18 {
            term = self.matmul(term, sq);
            term = self.scale(term, 1.0 / k as f64);
            total = self.add(total, term);
        }
        let diag = self.diag_of(total);
        let tr = self.sum_all(diag);
        self.add_scalar(tr, -(d as f64))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward requires a scalar loss"
        );
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        macro_rules! acc {
            ($idx:expr, $grad:expr) => {{
                let g = $grad;
                match &mut adj[$idx] {
                    Some(cur) => *cur += &g,
                    slot @ None => *slot = Some(g),
                }
            }};
        }

        for i in (0..self.nodes.len()).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc!(a, g.clone());
                    acc!(b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc!(a, g.clone());
                    acc!(b, g.mapv(|x| -x));
                }
                Op::Neg(a) => acc!(a, g.mapv(|x| -x)),
                Op::Mul(a, b) => {
                    acc!(a, &g * &self.nodes[b].value);
                    acc!(b, &g * &self.nodes[a].value);
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[b].value;
                    acc!(a, &g / bv);
                    let y = &self.nodes[i].value;
                    acc!(b, -(&g * y) / bv);
                }
                Op::MatMul(a, b) => {
                    acc!(a, g.dot(&self.nodes[b].value.t()));
                    acc!(b, self.nodes[a].value.t().dot(&g));
                }
                Op::Transpose(a) => acc!(a, g.t().to_owned()),
                Op::Scale(a, s) => acc!(a, g.mapv(|x| s * x)),
                Op::AddScalar(a) => acc!(a, g.clone()),
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    acc!(a, &g * &y.mapv(|t| 1.0 - t * t));
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    acc!(a, &g * &y.mapv(|s| s * (1.0 - s)));
                }
                Op::Softplus(a) => {
                    let x = &self.nodes[a].value;
                    acc!(a, &g * &x.mapv(sigmoid));
                }
                Op::Exp(a) => {
                    let y = &self.nodes[i].value;
                    acc!(a, &g * y);
                }
                Op::Ln(a) => {
                    let x = &self.nodes[a].value;
                    acc!(a, &g / x);
                }
                Op::Abs(a) => {
                    let x = &self.nodes[a].value;
                    acc!(a, &g * &x.mapv(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }));
                }
                Op::SumAll(a) => {
                    let shape = self.nodes[a].value.raw_dim();
                    acc!(a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::MeanAll(a) => {
                    let shape = self.nodes[a].value.raw_dim();
                    let n = self.nodes[a].value.len() as f64;
                    acc!(a, Array2::from_elem(shape, g[[0, 0]] / n));
                }
                Op::AddRowBroadcast(x, r) => {
                    acc!(x, g.clone());
                    let rs = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc!(r, rs);
                }
                Op::MulRowBroadcast(x, r) => {
                    let rv = self.nodes[r].value.row(0).to_owned();
                    acc!(x, &g * &rv);
                    let gr = (&g * &self.nodes[x].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    acc!(r, gr);
                }
                Op::MulColBroadcast(x, c) => {
                    let cv = self.nodes[c].value.column(0).to_owned();
                    let mut gx = g.clone();
                    for (mut row, s) in gx.rows_mut().into_iter().zip(cv.iter()) {
                        row.mapv_inplace(|v| v * s);
                    }
                    acc!(x, gx);
                    let gc = (&g * &self.nodes[x].value)
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    acc!(c, gc);
                }
                Op::DivColBroadcast(x, c) => {
                    let cv = self.nodes[c].value.column(0).to_owned();
                    let mut gx = g.clone();
                    for (mut row, s) in gx.rows_mut().into_iter().zip(cv.iter()) {
                        row.mapv_inplace(|v| v / s);
                    }
                    acc!(x, gx);
                    let y = &self.nodes[i].value;
                    let mut gc = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    for (v, s) in gc.iter_mut().zip(cv.iter()) {
                        *v = -*v / s;
                    }
                    acc!(c, gc);
                }
                Op::MulScalarVar(x, sidx) => {
                    let sv = self.nodes[sidx].value[[0, 0]];
                    acc!(x, g.mapv(|v| v * sv));
                    let gs = (&g * &self.nodes[x].value).sum();
                    acc!(sidx, Array2::from_elem((1, 1), gs));
                }
                Op::AddScalarVar(x, sidx) => {
                    acc!(x, g.clone());
                    acc!(sidx, Array2::from_elem((1, 1), g.sum()));
                }
                Op::SliceCols(a, c0, _c1) => {
                    let mut ga = Array2::zeros(self.nodes[a].value.raw_dim());
                    ga.slice_mut(s![.., c0..c0 + g.ncols()]).assign(&g);
                    acc!(a, ga);
                }
                Op::SliceRows(a, r0, _r1) => {
                    let mut ga = Array2::zeros(self.nodes[a].value.raw_dim());
                    ga.slice_mut(s![r0..r0 + g.nrows(), ..]).assign(&g);
                    acc!(a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let w = self.nodes[p].value.ncols();
                        acc!(p, g.slice(s![.., c0..c0 + w]).to_owned());
                        c0 += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for p in parts {
                        let h = self.nodes[p].value.nrows();
                        acc!(p, g.slice(s![r0..r0 + h, ..]).to_owned());
                        r0 += h;
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a].value.raw_dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    acc!(a, Array2::from_shape_vec(shape, flat).unwrap());
                }
                Op::MatInv(a) => {
                    // d(A^-1) = -A^-1 dA A^-1  =>  gA = -Y^T g Y^T
                    let y = &self.nodes[i].value;
                    let ga = -(y.t().dot(&g).dot(&y.t()));
                    acc!(a, ga);
                }
                Op::DiagOf(a) => {
                    let d = self.nodes[a].value.nrows();
                    let mut ga = Array2::zeros((d, d));
                    for k in 0..d {
                        ga[[k, k]] = g[[k, 0]];
                    }
                    acc!(a, ga);
                }
                Op::DiagMat(a) => {
                    let d = g.nrows();
                    let mut ga = Array2::zeros((d, 1));
                    for k in 0..d {
                        ga[[k, 0]] = g[[k, k]];
                    }
                    acc!(a, ga);
                }
            }
        }
        Gradients { adj }
    }
}
