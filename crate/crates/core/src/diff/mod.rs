//! Reverse-mode differentiation over a tape of dense matrix nodes.
//!
//! Every node stores its forward value. Second-order spatial derivatives are
//! obtained by pushing order-2 jets forward through the tape (see [`jet`]); the
//! jet components are ordinary nodes, so a single reverse sweep yields
//! parameter gradients of objectives that contain `∂x` and `∂xx` terms.
//!
//! A graph is built once per batch and thrown away.

mod check;
pub(crate) mod fastmath;
mod jet;

pub use check::{check_gradient, GradientCheck, ParamDiscrepancy};
pub use jet::{jet_propagate, Primitive, SpatialJet};

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Matrix};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Smooth scalar functions applied elementwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Exp,
    Square,
    Sqrt,
    Recip,
}

impl Unary {
    pub fn name(self) -> &'static str {
        match self {
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Recip => "reciprocal",
        }
    }

    #[inline]
    pub fn eval(self, a: f64) -> f64 {
        match self {
            Unary::Tanh => fastmath::tanh(a),
            Unary::Exp => a.exp(),
            Unary::Square => a * a,
            Unary::Sqrt => a.sqrt(),
            Unary::Recip => 1.0 / a,
        }
    }

    /// First three derivatives at `a`, given `fa = f(a)`.
    #[inline]
    pub fn derivs(self, a: f64, fa: f64) -> (f64, f64, f64) {
        match self {
            Unary::Tanh => {
                let s = 1.0 - fa * fa;
                (s, -2.0 * fa * s, -2.0 * s * (1.0 - 3.0 * fa * fa))
            }
            Unary::Exp => (fa, fa, fa),
            Unary::Square => (2.0 * a, 2.0, 0.0),
            Unary::Sqrt => {
                let d1 = 0.5 / fa;
                (d1, -d1 / (2.0 * a), 3.0 * d1 / (4.0 * a * a))
            }
            Unary::Recip => {
                let r2 = fa * fa;
                (-r2, 2.0 * r2 * fa, -6.0 * r2 * r2)
            }
        }
    }
}

/// Runs `$body` with `$k` bound to a literal variant so the per-element
/// `match` in [`Unary::eval`] folds away inside hot loops.
macro_rules! with_unary {
    ($f:expr, |$k:ident| $body:expr) => {
        match $f {
            Unary::Tanh => {
                let $k = Unary::Tanh;
                $body
            }
            Unary::Exp => {
                let $k = Unary::Exp;
                $body
            }
            Unary::Square => {
                let $k = Unary::Square;
                $body
            }
            Unary::Sqrt => {
                let $k = Unary::Sqrt;
                $body
            }
            Unary::Recip => {
                let $k = Unary::Recip;
                $body
            }
        }
    };
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    /// `scale * x + shift`
    ScaleShift(Var, f64, f64),
    Unary(Var, Unary),
    MatMul(Var, Var),
    /// `x · w + b` with `b` a 1 x out row broadcast over rows.
    Affine { x: Var, w: Var, b: Var },
    /// Affine map of a stacked jet: bias enters the value block only.
    JetAffine { x: Var, w: Var, b: Var },
    JetUnary(Var, Unary),
    JetMul(Var, Var),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    /// Each row repeated `times` times consecutively.
    RepeatRows { x: Var, times: usize },
    Sum(Var),
    Mean(Var),
    /// Biased Gaussian-kernel MMD between the row sets of `x` and `y`,
    /// summed over squared bandwidths.
    Mmd { x: Var, y: Var, bandwidths: Vec<f64> },
    /// Mean over rows `j` of the singleton MMD between `x_j` and `y_j`.
    PairMmd { x: Var, y: Var, bandwidths: Vec<f64> },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::ScaleShift(..) => "affine-scalar",
            Op::Unary(_, u) => u.name(),
            Op::MatMul(..) => "matmul",
            Op::Affine { .. } => "affine",
            Op::JetAffine { .. } => "jet-affine",
            Op::JetUnary(..) => "jet-unary",
            Op::JetMul(..) => "jet-mul",
            Op::SliceRows { .. } => "slice-rows",
            Op::ConcatRows(..) => "concat-rows",
            Op::ConcatCols(..) => "concat-cols",
            Op::Reshape(..) => "reshape",
            Op::RepeatRows { .. } => "repeat-rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Mmd { .. } => "mmd",
            Op::PairMmd { .. } => "pair-mmd",
        }
    }

    fn operands(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::JetMul(a, b) => {
                vec![*a, *b]
            }
            Op::Neg(a)
            | Op::ScaleShift(a, ..)
            | Op::Unary(a, _)
            | Op::JetUnary(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::SliceRows { x, .. } | Op::RepeatRows { x, .. } => vec![*x],
            Op::Affine { x, w, b } | Op::JetAffine { x, w, b } => vec![*x, *w, *b],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::Mmd { x, y, .. } | Op::PairMmd { x, y, .. } => vec![*x, *y],
        }
    }
}

struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

/// Append-only computation tape. Operands always precede their users.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.kind()
    }

    /// Constant input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_leaf(value, false)
    }

    /// Differentiable input (a parameter or anything else gradients are requested for).
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Var {
        let value = self.compute(&op);
        let needs_grad = op.operands().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg(a))
    }

    pub fn scale_shift(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.push(Op::ScaleShift(a, scale, shift))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.push(Op::ScaleShift(a, scale, 0.0))
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        self.push(Op::Unary(a, f))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul(a, b))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        self.push(Op::Affine { x, w, b })
    }

    pub(crate) fn jet_affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        self.push(Op::JetAffine { x, w, b })
    }

    pub(crate) fn jet_unary(&mut self, x: Var, f: Unary) -> Var {
        self.push(Op::JetUnary(x, f))
    }

    pub(crate) fn jet_mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::JetMul(a, b))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.value(x).rows(), "row slice out of range");
        // The output length lives in the node value's shape.
        let op = Op::SliceRows { x, start };
        let value = self.value(x).slice_rows(start, len);
        let needs_grad = self.nodes[x.0].needs_grad;
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(x).clone().reshaped(rows, cols);
        let needs_grad = self.nodes[x.0].needs_grad;
        self.nodes.push(Node {
            op: Op::Reshape(x),
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        self.push(Op::RepeatRows { x, times })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.push(Op::Mean(x))
    }

    /// Biased MMD V-statistic between the rows of `x` and `y` with Gaussian
    /// kernels `exp(-‖a-b‖² / (2σ²))`, one term per squared bandwidth `σ²`.
    pub fn mmd(&mut self, x: Var, y: Var, bandwidths: &[f64]) -> Var {
        self.push(Op::Mmd {
            x,
            y,
            bandwidths: bandwidths.to_vec(),
        })
    }

    /// `(1/n) Σ_j Σ_σ 2(1 - exp(-‖x_j - y_j‖² / (2σ²)))`.
    pub fn pair_mmd(&mut self, x: Var, y: Var, bandwidths: &[f64]) -> Var {
        self.push(Op::PairMmd {
            x,
            y,
            bandwidths: bandwidths.to_vec(),
        })
    }

    /// Replace the value of a leaf. Call [`Graph::reevaluate`] afterwards.
    pub fn set_leaf(&mut self, v: Var, value: Matrix) {
        let node = &mut self.nodes[v.0];
        assert!(matches!(node.op, Op::Leaf), "set_leaf on a non-leaf node");
        assert_eq!(node.value.shape(), value.shape(), "set_leaf changes shape");
        node.value = value;
    }

    /// Recompute every non-leaf value from the current leaves.
    pub fn reevaluate(&mut self) {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = match &self.nodes[i].op {
                Op::SliceRows { x, start } => {
                    let len = self.nodes[i].value.rows();
                    self.value(*x).slice_rows(*start, len)
                }
                Op::Reshape(x) => {
                    let (r, c) = self.nodes[i].value.shape();
                    self.value(*x).clone().reshaped(r, c)
                }
                op => self.compute(op),
            };
            self.nodes[i].value = value;
        }
    }

    fn compute(&self, op: &Op) -> Matrix {
        let val = |v: &Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf | Op::SliceRows { .. } | Op::Reshape(_) => {
                unreachable!("computed at construction")
            }
            Op::Add(a, b) => val(a).zip_map(val(b), |x, y| x + y),
            Op::Sub(a, b) => val(a).zip_map(val(b), |x, y| x - y),
            Op::Mul(a, b) => val(a).zip_map(val(b), |x, y| x * y),
            Op::Neg(a) => val(a).map(|x| -x),
            Op::ScaleShift(a, s, t) => {
                let (s, t) = (*s, *t);
                val(a).map(|x| s * x + t)
            }
            Op::Unary(a, f) => with_unary!(*f, |k| val(a).map(|x| k.eval(x))),
            Op::MatMul(a, b) => val(a).matmul(val(b)),
            Op::Affine { x, w, b } => {
                let (x, w, b) = (val(x), val(w), val(b));
                check_bias(w, b);
                let mut out = Matrix::zeros(x.rows(), w.cols());
                for r in 0..out.rows() {
                    out.row_mut(r).copy_from_slice(b.data());
                }
                gemm_nn(x, w, &mut out, 1.0);
                out
            }
            Op::JetAffine { x, w, b } => {
                let (x, w, b) = (val(x), val(w), val(b));
                check_bias(w, b);
                assert_eq!(x.rows() % 3, 0, "jet rows must be a multiple of 3");
                let block = x.rows() / 3;
                let mut out = Matrix::zeros(x.rows(), w.cols());
                for r in 0..block {
                    out.row_mut(r).copy_from_slice(b.data());
                }
                gemm_nn(x, w, &mut out, 1.0);
                out
            }
            Op::JetUnary(a, f) => jet_unary_forward(val(a), *f),
            Op::JetMul(a, b) => jet_mul_forward(val(a), val(b)),
            Op::ConcatRows(parts) => {
                let cols = val(&parts[0]).cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let m = val(p);
                    assert_eq!(m.cols(), cols, "concat_rows column mismatch");
                    rows += m.rows();
                    data.extend_from_slice(m.data());
                }
                Matrix::from_vec(rows, cols, data)
            }
            Op::ConcatCols(parts) => {
                let rows = val(&parts[0]).rows();
                let cols: usize = parts.iter().map(|p| val(p).cols()).sum();
                let mut out = Matrix::zeros(rows, cols);
                let mut offset = 0;
                for p in parts {
                    let m = val(p);
                    assert_eq!(m.rows(), rows, "concat_cols row mismatch");
                    for r in 0..rows {
                        out.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
                    }
                    offset += m.cols();
                }
                out
            }
            Op::RepeatRows { x, times } => {
                let m = val(x);
                let mut data = Vec::with_capacity(m.len() * times);
                for r in 0..m.rows() {
                    for _ in 0..*times {
                        data.extend_from_slice(m.row(r));
                    }
                }
                Matrix::from_vec(m.rows() * times, m.cols(), data)
            }
            Op::Sum(x) => Matrix::scalar(val(x).sum()),
            Op::Mean(x) => {
                let m = val(x);
                assert!(!m.is_empty(), "mean of an empty matrix");
                Matrix::scalar(m.sum() / m.len() as f64)
            }
            Op::Mmd { x, y, bandwidths } => {
                Matrix::scalar(mmd_value(val(x), val(y), bandwidths))
            }
            Op::PairMmd { x, y, bandwidths } => {
                let (x, y) = (val(x), val(y));
                assert_eq!(x.shape(), y.shape(), "pair_mmd shape mismatch");
                assert!(x.rows() > 0, "pair_mmd on empty sets");
                let mut total = 0.0;
                for j in 0..x.rows() {
                    let d = sq_dist(x.row(j), y.row(j));
                    for &s2 in bandwidths {
                        total += 2.0 * (1.0 - (-d / (2.0 * s2)).exp());
                    }
                }
                Matrix::scalar(total / x.rows() as f64)
            }
        }
    }

    /// Gradients of the scalar `objective` with respect to each leaf in `wrt`.
    ///
    /// Leaves the objective does not reach get an all-zero gradient.
    pub fn grad(&self, objective: Var, wrt: &[Var]) -> Result<Vec<Matrix>> {
        let root = &self.nodes[objective.0];
        let (rows, cols) = root.value.shape();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarObjective { rows, cols });
        }
        if !root.value.item().is_finite() {
            return Err(Error::NonFiniteObjective(root.value.item()));
        }
        for v in wrt {
            let node = &self.nodes[v.0];
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                return Err(Error::NotDifferentiableLeaf(v.0));
            }
        }

        let mut grads: Vec<Option<Matrix>> = vec![None; objective.0 + 1];
        let mut blame: Vec<usize> = (0..=objective.0).collect();
        if root.needs_grad {
            grads[objective.0] = Some(Matrix::scalar(1.0));
        }
        for idx in (0..=objective.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            // Complete once taken, so one scan per node; blame the last contributor.
            if !g.all_finite() {
                let node = blame[idx];
                return Err(Error::NonFiniteGradient {
                    node,
                    kind: self.nodes[node].op.kind(),
                });
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop(idx, g, &mut grads);
            for v in self.nodes[idx].op.operands() {
                blame[v.0] = idx;
            }
        }

        Ok(wrt
            .iter()
            .map(|v| {
                grads
                    .get_mut(v.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| {
                        let (r, c) = self.shape(*v);
                        Matrix::zeros(r, c)
                    })
            })
            .collect())
    }

    fn backprop(&self, idx: usize, g: Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        let val = |v: &Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(b) {
                    accumulate(grads, *b, g.clone());
                }
                if needs(a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Sub(a, b) => {
                if needs(b) {
                    accumulate(grads, *b, g.map(|x| -x));
                }
                if needs(a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    accumulate(grads, *a, g.zip_map(val(b), |x, y| x * y));
                }
                if needs(b) {
                    accumulate(grads, *b, g.zip_map(val(a), |x, y| x * y));
                }
            }
            Op::Neg(a) => accumulate(grads, *a, g.map(|x| -x)),
            Op::ScaleShift(a, s, _) => {
                let s = *s;
                accumulate(grads, *a, g.map(|x| s * x));
            }
            Op::Unary(a, f) => {
                let input = val(a);
                let mut ga = g;
                with_unary!(*f, |k| {
                    for ((gv, &x), &y) in ga
                        .data_mut()
                        .iter_mut()
                        .zip(input.data())
                        .zip(node.value.data())
                    {
                        *gv *= k.derivs(x, y).0;
                    }
                });
                accumulate(grads, *a, ga);
            }
            Op::MatMul(a, b) => {
                if needs(a) {
                    accumulate_gemm(grads, *a, val(a).shape(), |out, beta| {
                        gemm_nt(&g, val(b), out, beta)
                    });
                }
                if needs(b) {
                    accumulate_gemm(grads, *b, val(b).shape(), |out, beta| {
                        gemm_tn(val(a), &g, out, beta)
                    });
                }
            }
            Op::Affine { x, w, b } | Op::JetAffine { x, w, b } => {
                if needs(x) {
                    accumulate_gemm(grads, *x, val(x).shape(), |out, beta| {
                        gemm_nt(&g, val(w), out, beta)
                    });
                }
                if needs(w) {
                    accumulate_gemm(grads, *w, val(w).shape(), |out, beta| {
                        gemm_tn(val(x), &g, out, beta)
                    });
                }
                if needs(b) {
                    let bias_rows = match node.op {
                        Op::JetAffine { .. } => g.rows() / 3,
                        _ => g.rows(),
                    };
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..bias_rows {
                        for (acc, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::JetUnary(a, f) => {
                let ga = jet_unary_backward(val(a), &node.value, g, *f);
                accumulate(grads, *a, ga);
            }
            Op::JetMul(a, b) => {
                if needs(a) {
                    accumulate(grads, *a, jet_mul_backward(val(b), &g));
                }
                if needs(b) {
                    accumulate(grads, *b, jet_mul_backward(val(a), &g));
                }
            }
            Op::SliceRows { x, start } => {
                let (rows, cols) = val(x).shape();
                let mut gx = Matrix::zeros(rows, cols);
                gx.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                accumulate(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = val(p).shape();
                    if needs(p) {
                        let part = Matrix::from_vec(
                            r,
                            c,
                            g.data()[offset * c..(offset + r) * c].to_vec(),
                        );
                        accumulate(grads, *p, part);
                    }
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = val(p).shape();
                    if needs(p) {
                        let part = Matrix::from_fn(r, c, |i, j| g.get(i, offset + j));
                        accumulate(grads, *p, part);
                    }
                    offset += c;
                }
            }
            Op::Reshape(x) => {
                let (r, c) = val(x).shape();
                accumulate(grads, *x, g.reshaped(r, c));
            }
            Op::RepeatRows { x, times } => {
                let (r, c) = val(x).shape();
                let mut gx = Matrix::zeros(r, c);
                for i in 0..r {
                    let dst = gx.row_mut(i);
                    for t in 0..*times {
                        for (d, v) in dst.iter_mut().zip(g.row(i * times + t)) {
                            *d += v;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let (r, c) = val(x).shape();
                accumulate(grads, *x, Matrix::filled(r, c, g.item()));
            }
            Op::Mean(x) => {
                let (r, c) = val(x).shape();
                accumulate(grads, *x, Matrix::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::Mmd { x, y, bandwidths } => {
                let (gx, gy) = mmd_backward(val(x), val(y), bandwidths, g.item());
                if needs(x) {
                    accumulate(grads, *x, gx);
                }
                if needs(y) {
                    accumulate(grads, *y, gy);
                }
            }
            Op::PairMmd { x, y, bandwidths } => {
                let (xm, ym) = (val(x), val(y));
                let scale = g.item() / xm.rows() as f64;
                let mut gx = Matrix::zeros(xm.rows(), xm.cols());
                for j in 0..xm.rows() {
                    let d = sq_dist(xm.row(j), ym.row(j));
                    let coef: f64 = bandwidths
                        .iter()
                        .map(|&s2| 2.0 * (-d / (2.0 * s2)).exp() / s2)
                        .sum::<f64>()
                        * scale;
                    for ((o, a), b) in gx.row_mut(j).iter_mut().zip(xm.row(j)).zip(ym.row(j)) {
                        *o = coef * (a - b);
                    }
                }
                if needs(y) {
                    accumulate(grads, *y, gx.map(|v| -v));
                }
                if needs(x) {
                    accumulate(grads, *x, gx);
                }
            }
        }
    }
}

fn check_bias(w: &Matrix, b: &Matrix) {
    assert_eq!(b.shape(), (1, w.cols()), "bias must be a 1 x out row");
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_gemm(
    grads: &mut [Option<Matrix>],
    v: Var,
    shape: (usize, usize),
    f: impl FnOnce(&mut Matrix, f64),
) {
    match &mut grads[v.0] {
        Some(existing) => f(existing, 1.0),
        slot @ None => {
            let mut out = Matrix::zeros(shape.0, shape.1);
            f(&mut out, 0.0);
            *slot = Some(out);
        }
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Total order on matrices used to make `mmd(x, y)` and `mmd(y, x)` run the
/// exact same arithmetic.
fn canonical_order<'a>(x: &'a Matrix, y: &'a Matrix) -> (&'a Matrix, &'a Matrix) {
    let key = |m: &Matrix| (m.rows(), m.cols());
    let ord = key(x).cmp(&key(y)).then_with(|| {
        x.data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    if ord.is_gt() {
        (y, x)
    } else {
        (x, y)
    }
}

fn mmd_value(x: &Matrix, y: &Matrix, bandwidths: &[f64]) -> f64 {
    assert_eq!(x.cols(), y.cols(), "mmd dimension mismatch");
    assert!(x.rows() > 0 && y.rows() > 0, "mmd on empty sets");
    let (a, b) = canonical_order(x, y);
    let (n, m) = (a.rows() as f64, b.rows() as f64);
    let coefs: Vec<f64> = bandwidths.iter().map(|&s2| -1.0 / (2.0 * s2)).collect();
    let kernel = |p: &[f64], q: &[f64]| {
        let d = sq_dist(p, q);
        coefs.iter().map(|&c| (c * d).exp()).sum::<f64>()
    };
    let within = |s: &Matrix| {
        let mut off = 0.0;
        for i in 0..s.rows() {
            for j in (i + 1)..s.rows() {
                off += kernel(s.row(i), s.row(j));
            }
        }
        // k(p, p) = 1 for every bandwidth
        (coefs.len() * s.rows()) as f64 + 2.0 * off
    };
    let mut cross = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            cross += kernel(a.row(i), b.row(j));
        }
    }
    within(a) / (n * n) + within(b) / (m * m) - 2.0 * cross / (n * m)
}

fn mmd_backward(x: &Matrix, y: &Matrix, bandwidths: &[f64], upstream: f64) -> (Matrix, Matrix) {
    let (n, m) = (x.rows(), y.rows());
    let d = x.cols();
    let mut gx = Matrix::zeros(n, d);
    let mut gy = Matrix::zeros(m, d);
    let coefs: Vec<(f64, f64)> = bandwidths.iter().map(|&s2| (-1.0 / (2.0 * s2), 1.0 / s2)).collect();
    // d k(a,b) / d a = -k (a - b) / σ², summed over bandwidths
    let pair = |p: &[f64], q: &[f64], w: f64, gp: &mut [f64], gq: &mut [f64]| {
        let dist = sq_dist(p, q);
        let slope: f64 = coefs.iter().map(|&(c, inv)| (c * dist).exp() * inv).sum();
        let coef = -w * slope;
        for (((a, b), ga), gb) in p.iter().zip(q).zip(gp.iter_mut()).zip(gq.iter_mut()) {
            let diff = coef * (a - b);
            *ga += diff;
            *gb -= diff;
        }
    };
    // within-x: each unordered pair appears twice in the double sum
    let wx = 2.0 * upstream / (n * n) as f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let (lo, hi) = gx.data_mut().split_at_mut(j * d);
            pair(x.row(i), x.row(j), wx, &mut lo[i * d..(i + 1) * d], &mut hi[..d]);
        }
    }
    let wy = 2.0 * upstream / (m * m) as f64;
    for i in 0..m {
        for j in (i + 1)..m {
            let (lo, hi) = gy.data_mut().split_at_mut(j * d);
            pair(y.row(i), y.row(j), wy, &mut lo[i * d..(i + 1) * d], &mut hi[..d]);
        }
    }
    let wxy = -2.0 * upstream / (n * m) as f64;
    for i in 0..n {
        for j in 0..m {
            pair(x.row(i), y.row(j), wxy, gx.row_mut(i), gy.row_mut(j));
        }
    }
    (gx, gy)
}

fn jet_unary_forward(a: &Matrix, f: Unary) -> Matrix {
    assert_eq!(a.rows() % 3, 0, "jet rows must be a multiple of 3");
    let block = a.len() / 3;
    let (a0, rest) = a.data().split_at(block);
    let (a1, a2) = rest.split_at(block);
    let mut out = Matrix::zeros(a.rows(), a.cols());
    let (o0, rest) = out.data_mut().split_at_mut(block);
    let (o1, o2) = rest.split_at_mut(block);
    let inputs = a0.iter().zip(a1).zip(a2);
    let outputs = o0.iter_mut().zip(o1.iter_mut()).zip(o2.iter_mut());
    with_unary!(f, |k| {
        for (((&x, &x1), &x2), ((y0, y1), y2)) in inputs.zip(outputs) {
            let f0 = k.eval(x);
            let (d1, d2, _) = k.derivs(x, f0);
            *y0 = f0;
            *y1 = d1 * x1;
            *y2 = d1 * x2 + d2 * x1 * x1;
        }
    });
    out
}

/// Overwrites the output gradient `g` with the gradient for the input jet.
fn jet_unary_backward(a: &Matrix, out: &Matrix, mut g: Matrix, f: Unary) -> Matrix {
    let block = a.len() / 3;
    let (a0, rest) = a.data().split_at(block);
    let (a1, a2) = rest.split_at(block);
    let od = &out.data()[..block];
    let (g0, rest) = g.data_mut().split_at_mut(block);
    let (g1, g2) = rest.split_at_mut(block);
    let inputs = a0.iter().zip(a1).zip(a2).zip(od);
    let grads = g0.iter_mut().zip(g1.iter_mut()).zip(g2.iter_mut());
    with_unary!(f, |k| {
        for ((((&x, &x1), &x2), &y), ((r0, r1), r2)) in inputs.zip(grads) {
            let (v0, v1, v2) = (*r0, *r1, *r2);
            let (d1, d2, d3) = k.derivs(x, y);
            *r0 = v0 * d1 + v1 * d2 * x1 + v2 * (d2 * x2 + d3 * x1 * x1);
            *r1 = v1 * d1 + 2.0 * v2 * d2 * x1;
            *r2 = v2 * d1;
        }
    });
    g
}

fn jet_mul_forward(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.shape(), b.shape(), "jet_mul shape mismatch");
    assert_eq!(a.rows() % 3, 0, "jet rows must be a multiple of 3");
    let block = a.len() / 3;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; a.len()];
    for e in 0..block {
        let (a0, a1, a2) = (ad[e], ad[block + e], ad[2 * block + e]);
        let (b0, b1, b2) = (bd[e], bd[block + e], bd[2 * block + e]);
        out[e] = a0 * b0;
        out[block + e] = a1 * b0 + a0 * b1;
        out[2 * block + e] = a2 * b0 + 2.0 * a1 * b1 + a0 * b2;
    }
    Matrix::from_vec(a.rows(), a.cols(), out)
}

/// Gradient of a jet product with respect to one factor, given the other.
fn jet_mul_backward(other: &Matrix, g: &Matrix) -> Matrix {
    let block = g.len() / 3;
    let (bd, gd) = (other.data(), g.data());
    let mut ga = vec![0.0; g.len()];
    for e in 0..block {
        let (b0, b1, b2) = (bd[e], bd[block + e], bd[2 * block + e]);
        let (g0, g1, g2) = (gd[e], gd[block + e], gd[2 * block + e]);
        ga[e] = g0 * b0 + g1 * b1 + g2 * b2;
        ga[block + e] = g1 * b0 + 2.0 * g2 * b1;
        ga[2 * block + e] = g2 * b0;
    }
    Matrix::from_vec(g.rows(), g.cols(), ga)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(g: &mut Graph, v: f64) -> Var {
        g.param(Matrix::scalar(v))
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let p = scalar_param(&mut g, 3.0);
        let y = g.square(p);
        let grads = g.grad(y, &[p]).unwrap();
        assert_eq!(grads[0].item(), 6.0);
    }

    #[test]
    fn tanh_gradient_at_zero() {
        let mut g = Graph::new();
        let p = scalar_param(&mut g, 0.0);
        let y = g.tanh(p);
        assert_eq!(g.grad(y, &[p]).unwrap()[0].item(), 1.0);
    }

    #[test]
    fn unreachable_parameter_gets_exact_zero() {
        let mut g = Graph::new();
        let p = scalar_param(&mut g, 2.0);
        let q = g.param(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.exp(p);
        let grads = g.grad(y, &[p, q]).unwrap();
        assert!(grads[1].data().iter().all(|&v| v == 0.0));
        assert_eq!(grads[1].shape(), (2, 2));
    }

    #[test]
    fn non_finite_backward_names_node_kind() {
        let mut g = Graph::new();
        let p = scalar_param(&mut g, 0.0);
        let s = g.sqrt(p); // d/dp sqrt(p) at 0 is infinite
        let err = g.grad(s, &[p]).unwrap_err();
        match err {
            Error::NonFiniteGradient { kind, .. } => assert_eq!(kind, "sqrt"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let p = g.param(Matrix::zeros(2, 1));
        let y = g.tanh(p);
        assert!(matches!(
            g.grad(y, &[p]),
            Err(Error::NonScalarObjective { rows: 2, cols: 1 })
        ));
    }

    #[test]
    fn constant_leaf_is_not_a_gradient_target() {
        let mut g = Graph::new();
        let c = g.constant(Matrix::scalar(1.0));
        let p = scalar_param(&mut g, 1.0);
        let y = g.mul(c, p);
        assert!(matches!(g.grad(y, &[c]), Err(Error::NotDifferentiableLeaf(_))));
    }

    #[test]
    fn reevaluation_reproduces_cached_values() {
        let mut g = Graph::new();
        let x = g.param(Matrix::from_vec(3, 2, vec![0.1, -0.2, 0.3, 0.5, -0.7, 0.9]));
        let w = g.param(Matrix::from_vec(2, 2, vec![0.4, -1.1, 0.2, 0.8]));
        let b = g.param(Matrix::from_vec(1, 2, vec![0.05, -0.3]));
        let h = g.affine(x, w, b);
        let t = g.tanh(h);
        let s = g.slice_rows(t, 1, 2);
        let r = g.reshape(s, 1, 4);
        let m = g.mean(r);
        let before: Vec<Matrix> = (0..g.len()).map(|i| g.value(Var(i)).clone()).collect();
        g.reevaluate();
        for (i, v) in before.iter().enumerate() {
            assert_eq!(v, g.value(Var(i)));
        }
        assert_eq!(g.scalar(m), before[m.index()].item());
    }

    #[test]
    fn mmd_is_exactly_symmetric() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_fn(5, 3, |i, j| (i * 3 + j) as f64 * 0.37 % 1.3));
        let y = g.constant(Matrix::from_fn(7, 3, |i, j| ((i + j) as f64 * 0.71).sin()));
        let a = g.mmd(x, y, &[0.5, 2.0]);
        let b = g.mmd(y, x, &[0.5, 2.0]);
        assert_eq!(g.scalar(a), g.scalar(b));
    }
}
