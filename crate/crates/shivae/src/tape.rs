//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records operations as they execute (define by run) and
//! replays them backwards to accumulate gradients. Matrices are
//! `ndarray::Array2<f64>` with batch rows and feature columns; every op
//! validates shapes eagerly so graph bugs fail at the call site.
//!
//! The instruction set is intentionally small: exactly what the
//! recurrent variational model needs, each op with an analytic adjoint
//! that is checked against central finite differences in the tests.

use ndarray::{concatenate, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    AddRowVec(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    Concat(Vec<Var>),
    SliceCols(Var, usize, usize),
    LogSoftmax(Var),
    SumCols(Var),
    SumAll(Var),
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zero matrix if the
    /// node does not influence the loss.
    pub fn get(&self, tape: &Tape, v: Var) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(tape.nodes[v.0].value.dim()),
        }
    }
}

/// Numerically stable sigmoid.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus ln(1 + exp(x)).
pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    /// Scalar payload of a 1 x 1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on node of shape {:?}", val.dim());
        val[(0, 0)]
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Enter a matrix on the tape. Parameters and constants are both
    /// leaves; the caller decides whose gradients it reads back.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    fn binate(&self, a: Var, b: Var, name: &str) -> (usize, usize) {
        let (da, db) = (self.value(a).dim(), self.value(b).dim());
        assert_eq!(da, db, "{name}: shape mismatch {da:?} vs {db:?}");
        da
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binate(a, b, "add");
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binate(a, b, "sub");
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binate(a, b, "mul");
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binate(a, b, "div");
        let v = self.value(a) / self.value(b);
        self.push(Op::Div(a, b), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.value(a).dim();
        let (rb, cb) = self.value(b).dim();
        assert_eq!(ca, rb, "matmul: inner dims {ra}x{ca} . {rb}x{cb}");
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    /// Broadcast-add a 1 x J row vector to every row of a B x J matrix.
    pub fn add_row_vec(&mut self, a: Var, row: Var) -> Var {
        let (_, ca) = self.value(a).dim();
        let (rr, cr) = self.value(row).dim();
        assert_eq!((rr, cr), (1, ca), "add_row_vec: row must be 1x{ca}, got {rr}x{cr}");
        let v = self.value(a) + self.value(row);
        self.push(Op::AddRowVec(a, row), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(Op::Scale(a, c), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(Op::AddScalar(a), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid_scalar);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus_scalar);
        self.push(Op::Softplus(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(Op::Ln(a), v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    /// Elementwise max(x, c). The adjoint passes only where x > c, so a
    /// clamped entry stops influencing the loss.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x.max(c));
        self.push(Op::ClampMin(a, c), v)
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: empty part list");
        let rows = self.value(parts[0]).nrows();
        for &p in parts {
            assert_eq!(self.value(p).nrows(), rows, "concat_cols: row mismatch");
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols");
        self.push(Op::Concat(parts.to_vec()), v)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (_, c) = self.value(a).dim();
        assert!(start < end && end <= c, "slice_cols: {start}..{end} of {c} columns");
        let v = self.value(a).slice(ndarray::s![.., start..end]).to_owned();
        self.push(Op::SliceCols(a, start, end), v)
    }

    /// Row-wise log softmax with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&e| (e - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|e| e - lse);
        }
        self.push(Op::LogSoftmax(a), v)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let ls = self.log_softmax(a);
        self.exp(ls)
    }

    /// Sum across columns: B x J -> B x 1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_axis(Axis(1));
        let b = s.len();
        let v = s.into_shape_with_order((b, 1)).expect("sum_cols reshape");
        self.push(Op::SumCols(a), v)
    }

    /// Sum of all entries: 1 x 1.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(Op::SumAll(a), v)
    }

    /// Mean of all entries: 1 x 1.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Backpropagate from a 1 x 1 loss node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).dim(),
            (1, 1),
            "backward() requires a scalar loss node"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue; // keep leaf gradients for the caller to read
            }
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    accumulate(&mut grads, a.0, &g);
                    accumulate(&mut grads, b.0, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a.0, &g);
                    accumulate_neg(&mut grads, b.0, &g);
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, a.0, &(&g * self.value(*b)));
                    accumulate(&mut grads, b.0, &(&g * self.value(*a)));
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    accumulate(&mut grads, a.0, &(&g / bv));
                    let db = -&g * self.value(*a) / (bv * bv);
                    accumulate(&mut grads, b.0, &db);
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, a.0, &da);
                    accumulate(&mut grads, b.0, &db);
                }
                Op::AddRowVec(a, row) => {
                    accumulate(&mut grads, a.0, &g);
                    let col_sum = g.sum_axis(Axis(0));
                    let c = col_sum.len();
                    let drow = col_sum.into_shape_with_order((1, c)).unwrap();
                    accumulate(&mut grads, row.0, &drow);
                }
                Op::Scale(a, c) => accumulate(&mut grads, a.0, &(&g * *c)),
                Op::AddScalar(a) => accumulate(&mut grads, a.0, &g),
                Op::Relu(a) => {
                    let da = &g * &self.value(*a).mapv(|x| f64::from(x > 0.0));
                    accumulate(&mut grads, a.0, &da);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let da = &g * &y.mapv(|t| 1.0 - t * t);
                    accumulate(&mut grads, a.0, &da);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[idx].value;
                    let da = &g * &y.mapv(|s| s * (1.0 - s));
                    accumulate(&mut grads, a.0, &da);
                }
                Op::Softplus(a) => {
                    let da = &g * &self.value(*a).mapv(sigmoid_scalar);
                    accumulate(&mut grads, a.0, &da);
                }
                Op::Exp(a) => {
                    let da = &g * &self.nodes[idx].value;
                    accumulate(&mut grads, a.0, &da);
                }
                Op::Ln(a) => {
                    let da = &g / self.value(*a);
                    accumulate(&mut grads, a.0, &da);
                }
                Op::Sqrt(a) => {
                    let da = &g * &self.nodes[idx].value.mapv(|y| 0.5 / y);
                    accumulate(&mut grads, a.0, &da);
                }
                Op::ClampMin(a, c) => {
                    let da = &g * &self.value(*a).mapv(|x| f64::from(x > *c));
                    accumulate(&mut grads, a.0, &da);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        let gp = g.slice(ndarray::s![.., start..start + w]).to_owned();
                        accumulate(&mut grads, p.0, &gp);
                        start += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    da.slice_mut(ndarray::s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, a.0, &da);
                }
                Op::LogSoftmax(a) => {
                    // d/dx log_softmax = g - softmax(x) * rowsum(g)
                    let y = &self.nodes[idx].value;
                    let mut da = g.clone();
                    for (mut drow, (grow, yrow)) in
                        da.rows_mut().into_iter().zip(g.rows().into_iter().zip(y.rows()))
                    {
                        let s: f64 = grow.sum();
                        for (d, &yv) in drow.iter_mut().zip(yrow.iter()) {
                            *d -= yv.exp() * s;
                        }
                    }
                    accumulate(&mut grads, a.0, &da);
                }
                Op::SumCols(a) => {
                    let (r, c) = self.value(*a).dim();
                    let mut da = Array2::zeros((r, c));
                    for i in 0..r {
                        let gi = g[(i, 0)];
                        for j in 0..c {
                            da[(i, j)] = gi;
                        }
                    }
                    accumulate(&mut grads, a.0, &da);
                }
                Op::SumAll(a) => {
                    let da = Array2::from_elem(self.value(*a).dim(), g[(0, 0)]);
                    accumulate(&mut grads, a.0, &da);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], idx: usize, g: &Array2<f64>) {
    match &mut grads[idx] {
        Some(existing) => *existing += g,
        slot @ None => *slot = Some(g.clone()),
    }
}

fn accumulate_neg(grads: &mut [Option<Array2<f64>>], idx: usize, g: &Array2<f64>) {
    match &mut grads[idx] {
        Some(existing) => *existing -= g,
        slot @ None => *slot = Some(-g),
    }
}
