//! Order-2 spatial jets: `(value, ∂x, ∂xx)` carried forward through the graph.
//!
//! A jet over `n` points is stored as one `3n x c` node: the value block, then
//! the first-derivative block, then the second-derivative block. The fused jet
//! ops apply the second-order chain rule blockwise, so each jet component stays
//! an ordinary node that reverse mode can differentiate.

use super::{Graph, Unary, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Value and first two derivatives with respect to the spatial coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpatialJet {
    stacked: Var,
    rows: usize,
}

impl SpatialJet {
    /// Wrap an existing stacked `3n x c` node.
    pub fn from_stacked(g: &Graph, stacked: Var) -> Result<Self> {
        let (r, _) = g.shape(stacked);
        if r % 3 != 0 {
            return Err(Error::dim(format!("stacked jet has {r} rows, not a multiple of 3")));
        }
        Ok(Self {
            stacked,
            rows: r / 3,
        })
    }

    /// Assemble a jet from three same-shaped component nodes.
    pub fn from_parts(g: &mut Graph, value: Var, d1: Var, d2: Var) -> Result<Self> {
        let shape = g.shape(value);
        if g.shape(d1) != shape || g.shape(d2) != shape {
            return Err(Error::dim("jet components differ in shape"));
        }
        let stacked = g.concat_rows(&[value, d1, d2]);
        Ok(Self {
            stacked,
            rows: shape.0,
        })
    }

    /// The coordinate itself: `(x, 1, 0)` for each entry of the column `xs`.
    pub fn coordinate(g: &mut Graph, xs: &[f64]) -> Self {
        let n = xs.len();
        let mut data = Vec::with_capacity(3 * n);
        data.extend_from_slice(xs);
        data.extend(std::iter::repeat_n(1.0, n));
        data.extend(std::iter::repeat_n(0.0, n));
        let stacked = g.constant(Matrix::from_vec(3 * n, 1, data));
        Self { stacked, rows: n }
    }

    /// A quantity independent of `x`: `(v, 0, 0)`.
    pub fn independent(g: &mut Graph, value: Var) -> Self {
        let (r, c) = g.shape(value);
        let zeros = g.constant(Matrix::zeros(2 * r, c));
        let stacked = g.concat_rows(&[value, zeros]);
        Self { stacked, rows: r }
    }

    pub fn stacked(&self) -> Var {
        self.stacked
    }

    /// Number of points (rows of each component).
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn value(&self, g: &mut Graph) -> Var {
        g.slice_rows(self.stacked, 0, self.rows)
    }

    pub fn d1(&self, g: &mut Graph) -> Var {
        g.slice_rows(self.stacked, self.rows, self.rows)
    }

    pub fn d2(&self, g: &mut Graph) -> Var {
        g.slice_rows(self.stacked, 2 * self.rows, self.rows)
    }

    /// `(value, d1, d2)` as plain matrices.
    pub fn components(&self, g: &Graph) -> (Matrix, Matrix, Matrix) {
        let m = g.value(self.stacked);
        (
            m.slice_rows(0, self.rows),
            m.slice_rows(self.rows, self.rows),
            m.slice_rows(2 * self.rows, self.rows),
        )
    }

    /// Affine layer `x · w + b`; the bias only shifts the value block.
    pub fn affine(&self, g: &mut Graph, w: Var, b: Var) -> Self {
        let stacked = g.jet_affine(self.stacked, w, b);
        Self {
            stacked,
            rows: self.rows,
        }
    }

    /// Horizontal concatenation of jets over the same points.
    pub fn concat_cols(g: &mut Graph, parts: &[SpatialJet]) -> Result<Self> {
        let rows = parts.first().ok_or(Error::Empty("jet concat"))?.rows;
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::dim("jets over different point counts"));
        }
        let vars: Vec<Var> = parts.iter().map(|p| p.stacked).collect();
        Ok(Self {
            stacked: g.concat_cols(&vars),
            rows,
        })
    }
}

/// Primitive operations with spatial-jet rules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Neg,
    /// `scale * a + shift`
    ScaleShift { scale: f64, shift: f64 },
    Tanh,
    Exp,
    Square,
    Sqrt,
    Recip,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Neg => "neg",
            Primitive::ScaleShift { .. } => "affine-scalar",
            Primitive::Tanh => "tanh",
            Primitive::Exp => "exp",
            Primitive::Square => "square",
            Primitive::Sqrt => "sqrt",
            Primitive::Recip => "reciprocal",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul => 2,
            _ => 1,
        }
    }
}

/// Jet of `op(inputs)` by the second-order chain and product rules.
///
/// For a unary `f` applied to `(a, a₁, a₂)`:
/// `(f(a), f'(a)·a₁, f'(a)·a₂ + f''(a)·a₁²)`.
pub fn jet_propagate(g: &mut Graph, op: Primitive, inputs: &[SpatialJet]) -> Result<SpatialJet> {
    if inputs.len() != op.arity() {
        return Err(Error::JetArity {
            op: op.name(),
            expected: op.arity(),
            got: inputs.len(),
        });
    }
    if inputs.len() == 2 && g.shape(inputs[0].stacked) != g.shape(inputs[1].stacked) {
        return Err(Error::dim(format!("{} on jets of different shapes", op.name())));
    }
    let a = inputs[0];
    let stacked = match op {
        Primitive::Add => g.add(a.stacked, inputs[1].stacked),
        Primitive::Sub => g.sub(a.stacked, inputs[1].stacked),
        Primitive::Mul => g.jet_mul(a.stacked, inputs[1].stacked),
        Primitive::Neg => g.neg(a.stacked),
        Primitive::ScaleShift { scale, shift } => {
            let scaled = g.scale(a.stacked, scale);
            let (r, c) = g.shape(a.stacked);
            let block = r / 3;
            let offset = Matrix::from_fn(r, c, |i, _| if i < block { shift } else { 0.0 });
            let offset = g.constant(offset);
            g.add(scaled, offset)
        }
        Primitive::Tanh => g.jet_unary(a.stacked, Unary::Tanh),
        Primitive::Exp => g.jet_unary(a.stacked, Unary::Exp),
        Primitive::Square => g.jet_unary(a.stacked, Unary::Square),
        Primitive::Sqrt => g.jet_unary(a.stacked, Unary::Sqrt),
        Primitive::Recip => g.jet_unary(a.stacked, Unary::Recip),
    };
    Ok(SpatialJet {
        stacked,
        rows: a.rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple(g: &Graph, j: &SpatialJet) -> (f64, f64, f64) {
        let (v, d1, d2) = j.components(g);
        (v.item(), d1.item(), d2.item())
    }

    #[test]
    fn coordinate_leaf_is_x_one_zero() {
        let mut g = Graph::new();
        let x = SpatialJet::coordinate(&mut g, &[0.3]);
        assert_eq!(triple(&g, &x), (0.3, 1.0, 0.0));
    }

    #[test]
    fn independent_leaf_has_zero_derivatives() {
        let mut g = Graph::new();
        let p = g.param(Matrix::scalar(1.7));
        let j = SpatialJet::independent(&mut g, p);
        assert_eq!(triple(&g, &j), (1.7, 0.0, 0.0));
    }

    #[test]
    fn tanh_of_identity_jet_at_zero() {
        let mut g = Graph::new();
        let x = SpatialJet::coordinate(&mut g, &[0.0]);
        let t = jet_propagate(&mut g, Primitive::Tanh, &[x]).unwrap();
        assert_eq!(triple(&g, &t), (0.0, 1.0, 0.0));
    }

    #[test]
    fn product_of_identity_jets() {
        let mut g = Graph::new();
        let x = SpatialJet::coordinate(&mut g, &[2.0]);
        let sq = jet_propagate(&mut g, Primitive::Mul, &[x, x]).unwrap();
        assert_eq!(triple(&g, &sq), (4.0, 4.0, 2.0));
    }

    #[test]
    fn scale_shift_leaves_derivative_blocks_unshifted() {
        let mut g = Graph::new();
        let x = SpatialJet::coordinate(&mut g, &[1.5]);
        let y = jet_propagate(&mut g, Primitive::ScaleShift { scale: 3.0, shift: -1.0 }, &[x])
            .unwrap();
        assert_eq!(triple(&g, &y), (3.5, 3.0, 0.0));
    }

    #[test]
    fn arity_mismatch_is_an_error() {
        let mut g = Graph::new();
        let x = SpatialJet::coordinate(&mut g, &[0.0]);
        assert!(matches!(
            jet_propagate(&mut g, Primitive::Mul, &[x]),
            Err(Error::JetArity { expected: 2, got: 1, .. })
        ));
        assert!(jet_propagate(&mut g, Primitive::Exp, &[]).is_err());
    }

    /// exp(x²) against nested central differences of its value.
    #[test]
    fn exp_of_square_matches_nested_differences() {
        let f = |x: f64| (x * x).exp();
        for &x0 in &[-0.9, -0.3, 0.2, 0.7] {
            let mut g = Graph::new();
            let x = SpatialJet::coordinate(&mut g, &[x0]);
            let sq = jet_propagate(&mut g, Primitive::Square, &[x]).unwrap();
            let e = jet_propagate(&mut g, Primitive::Exp, &[sq]).unwrap();
            let (v, d1, d2) = triple(&g, &e);
            let h = 1e-4;
            let fd1 = (f(x0 + h) - f(x0 - h)) / (2.0 * h);
            let fd_prime = |x: f64| (f(x + h) - f(x - h)) / (2.0 * h);
            let fd2 = (fd_prime(x0 + h) - fd_prime(x0 - h)) / (2.0 * h);
            assert_eq!(v, f(x0));
            assert!(((d1 - fd1) / fd1.abs().max(1e-12)).abs() < 1e-4, "d1 {d1} vs {fd1}");
            assert!(((d2 - fd2) / fd2.abs().max(1e-12)).abs() < 1e-4, "d2 {d2} vs {fd2}");
        }
    }

    #[test]
    fn sqrt_and_reciprocal_rules() {
        let mut g = Graph::new();
        let x = SpatialJet::coordinate(&mut g, &[4.0]);
        let s = jet_propagate(&mut g, Primitive::Sqrt, &[x]).unwrap();
        let (v, d1, d2) = triple(&g, &s);
        assert_eq!(v, 2.0);
        assert!((d1 - 0.25).abs() < 1e-15);
        assert!((d2 + 1.0 / 32.0).abs() < 1e-15);
        let r = jet_propagate(&mut g, Primitive::Recip, &[x]).unwrap();
        let (v, d1, d2) = triple(&g, &r);
        assert_eq!((v, d1, d2), (0.25, -1.0 / 16.0, 2.0 / 64.0));
    }
}
