//! Generators composed with the differential and boundary operators.

use crate::diff::{Graph, SpatialJet, Var};
use crate::error::{Error, Result};
use crate::nets::{mlp_spatial_jet, mlp_values_at, GraphMlp};
use crate::stochgen::{ProblemMode, SensorLayout};

/// Coefficient in front of the divergence term.
pub const OPERATOR_SCALE: f64 = 0.1;

/// A 1-D elliptic problem on [−1, 1] with homogeneous Dirichlet data.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    pub mode: ProblemMode,
    pub layout: SensorLayout,
    pub noise_dim: usize,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.noise_dim == 0 {
            return Err(Error::Config("noise dimension must be >= 1".into()));
        }
        let [nk, nu, nf, _] = self.layout.counts();
        let ok = match self.mode {
            ProblemMode::Process => nk + nu == 0 && nf > 0 && self.layout.coords_b.is_empty(),
            ProblemMode::Forward | ProblemMode::HighDim => nu == 0,
            ProblemMode::Inverse => nk == 1,
            ProblemMode::Mixed => nk > 0 && nu > 0,
        };
        if !ok {
            return Err(Error::Config(format!(
                "{} problem does not fit sensor counts k={nk} u={nu} f={nf}",
                self.mode
            )));
        }
        Ok(())
    }

    /// Length of a concatenated snapshot, which is also the encoder input width.
    pub fn snapshot_len(&self) -> usize {
        self.layout.total_len()
    }
}

/// `−(1/10)(k'·u' + k·u'')` at every point of the jets, as an `n x 1` node.
pub fn elliptic_residual(g: &mut Graph, k: &SpatialJet, u: &SpatialJet) -> Result<Var> {
    if g.shape(k.stacked()) != g.shape(u.stacked()) {
        return Err(Error::dim("coefficient and solution jets differ in shape"));
    }
    let (k0, k1) = (k.value(g), k.d1(g));
    let (u1, u2) = (u.d1(g), u.d2(g));
    let flux_slope = g.mul(k1, u1);
    let curvature = g.mul(k0, u2);
    let sum = g.add(flux_slope, curvature);
    Ok(g.scale(sum, -OPERATOR_SCALE))
}

/// `n x p` matrix of generator values at `coords` for each latent row.
fn field_block(g: &mut Graph, net: &GraphMlp, coords: &[f64], latent: Var) -> Result<Var> {
    let n = g.shape(latent).0;
    let v = mlp_values_at(g, net, coords, latent)?;
    Ok(g.reshape(v, n, coords.len()))
}

/// Synthetic snapshots `[K̃ | Ũ | F̃ | B̃]`, one row per latent row.
///
/// With the real snapshots' own codes as `latent` this gives the
/// reconstructions.
pub fn synthetic_snapshot(g: &mut Graph, gen_k: &GraphMlp, gen_u: &GraphMlp, layout: &SensorLayout, latent: Var) -> Result<Var> {
    let n = g.shape(latent).0;
    let mut blocks = Vec::with_capacity(4);
    if !layout.coords_k.is_empty() {
        blocks.push(field_block(g, gen_k, &layout.coords_k, latent)?);
    }
    if !layout.coords_u.is_empty() {
        blocks.push(field_block(g, gen_u, &layout.coords_u, latent)?);
    }
    if !layout.coords_f.is_empty() {
        let kj = mlp_spatial_jet(g, gen_k, &layout.coords_f, latent)?;
        let uj = mlp_spatial_jet(g, gen_u, &layout.coords_f, latent)?;
        let r = elliptic_residual(g, &kj, &uj)?;
        blocks.push(g.reshape(r, n, layout.coords_f.len()));
    }
    if !layout.coords_b.is_empty() {
        blocks.push(field_block(g, gen_u, &layout.coords_b, latent)?);
    }
    if blocks.is_empty() {
        return Err(Error::Empty("sensor layout"));
    }
    Ok(g.concat_cols(&blocks))
}

/// Process-mode snapshots: the generator read at the sensors, `n x p`.
pub fn process_snapshot(g: &mut Graph, gen: &GraphMlp, coords: &[f64], latent: Var) -> Result<Var> {
    if coords.is_empty() {
        return Err(Error::Empty("sensor layout"));
    }
    field_block(g, gen, coords, latent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{jet_propagate, Primitive};
    use crate::nets::{init_mlp, MlpConfig, MlpParams};
    use crate::tensor::Matrix;

    fn constant_jet(g: &mut Graph, v: f64, d1: f64, d2: f64) -> SpatialJet {
        let parts = [v, d1, d2].map(|x| g.constant(Matrix::scalar(x)));
        SpatialJet::from_parts(g, parts[0], parts[1], parts[2]).unwrap()
    }

    #[test]
    fn residual_of_sine() {
        let pi = std::f64::consts::PI;
        let x: f64 = 0.5;
        let mut g = Graph::new();
        let k = constant_jet(&mut g, 1.0, 0.0, 0.0);
        let u = constant_jet(&mut g, (pi * x).sin(), pi * (pi * x).cos(), -pi * pi * (pi * x).sin());
        let r = elliptic_residual(&mut g, &k, &u).unwrap();
        assert!((g.value(r).item() - 0.986_960_4).abs() < 1e-7);
    }

    #[test]
    fn constant_solution_has_zero_residual() {
        let mut g = Graph::new();
        let k = constant_jet(&mut g, 2.3, -0.4, 1.1);
        let u = constant_jet(&mut g, 5.0, 0.0, 0.0);
        let r = elliptic_residual(&mut g, &k, &u).unwrap();
        assert_eq!(g.value(r).item(), 0.0);
    }

    #[test]
    fn identity_jets() {
        let xs = [-0.7, 0.0, 0.4];
        let mut g = Graph::new();
        let k = SpatialJet::coordinate(&mut g, &xs);
        let u = SpatialJet::coordinate(&mut g, &xs);
        let r = elliptic_residual(&mut g, &k, &u).unwrap();
        assert!(g.value(r).data().iter().all(|&v| (v + 0.1).abs() < 1e-15));
    }

    #[test]
    fn residual_is_linear_in_u() {
        let xs = [-0.3, 0.2, 0.8];
        let mut g = Graph::new();
        let x = SpatialJet::coordinate(&mut g, &xs);
        let k = jet_propagate(&mut g, Primitive::Exp, &[x]).unwrap();
        let u1 = jet_propagate(&mut g, Primitive::Tanh, &[x]).unwrap();
        let u2 = jet_propagate(&mut g, Primitive::Square, &[x]).unwrap();
        let (a, b) = (1.7, -0.6);
        let su1 = jet_propagate(&mut g, Primitive::ScaleShift { scale: a, shift: 0.0 }, &[u1]).unwrap();
        let su2 = jet_propagate(&mut g, Primitive::ScaleShift { scale: b, shift: 0.0 }, &[u2]).unwrap();
        let combo = jet_propagate(&mut g, Primitive::Add, &[su1, su2]).unwrap();
        let r = elliptic_residual(&mut g, &k, &combo).unwrap();
        let r1 = elliptic_residual(&mut g, &k, &u1).unwrap();
        let r2 = elliptic_residual(&mut g, &k, &u2).unwrap();
        for i in 0..xs.len() {
            let lhs = g.value(r).data()[i];
            let rhs = a * g.value(r1).data()[i] + b * g.value(r2).data()[i];
            assert!((lhs - rhs).abs() < 1e-13);
        }
    }

    fn layout() -> SensorLayout {
        SensorLayout::uniform(4, 3, 5, 2).unwrap()
    }

    #[test]
    fn snapshot_structure_and_boundary_bias() {
        let m = 2;
        let c = MlpConfig::new(1 + m, 1, 2, 6);
        let pk = init_mlp(c, 1).unwrap();
        let mut pu = MlpParams::from_flat(c, vec![0.0; c.param_count()]).unwrap();
        pu.bias_slice_mut(2)[0] = 0.37;
        let mut g = Graph::new();
        let gk = GraphMlp::bind(&mut g, &pk, true);
        let gu = GraphMlp::bind(&mut g, &pu, true);
        let z = g.constant(Matrix::from_vec(3, m, vec![0.1, -0.2, 0.5, 0.3, -1.0, 0.0]));
        let s = synthetic_snapshot(&mut g, &gk, &gu, &layout(), z).unwrap();
        assert_eq!(g.shape(s), (3, 4 + 3 + 5 + 2));
        let v = g.value(s);
        for j in 0..3 {
            assert_eq!(&v.row(j)[12..], &[0.37, 0.37]);
            assert!(v.row(j)[7..12].iter().all(|&r| r == 0.0));
        }
    }

    #[test]
    fn residual_block_matches_pointwise_recomputation() {
        let m = 3;
        let c = MlpConfig::new(1 + m, 1, 2, 8);
        let (pk, pu) = (init_mlp(c, 4).unwrap(), init_mlp(c, 5).unwrap());
        let latent = Matrix::from_fn(2, m, |i, j| 0.3 * i as f64 - 0.2 * j as f64 + 0.1);
        let lay = layout();
        let mut g = Graph::new();
        let gk = GraphMlp::bind(&mut g, &pk, true);
        let gu = GraphMlp::bind(&mut g, &pu, true);
        let z = g.constant(latent.clone());
        let s = synthetic_snapshot(&mut g, &gk, &gu, &lay, z).unwrap();
        let full = g.value(s).clone();
        for j in 0..2 {
            for (i, &x) in lay.coords_f.iter().enumerate() {
                let mut h = Graph::new();
                let hk = GraphMlp::bind(&mut h, &pk, false);
                let hu = GraphMlp::bind(&mut h, &pu, false);
                let zj = h.constant(Matrix::row_vector(latent.row(j)));
                let kj = mlp_spatial_jet(&mut h, &hk, &[x], zj).unwrap();
                let uj = mlp_spatial_jet(&mut h, &hu, &[x], zj).unwrap();
                let r = elliptic_residual(&mut h, &kj, &uj).unwrap();
                let got = full.get(j, 7 + i);
                assert!((got - h.value(r).item()).abs() < 1e-13 * (1.0 + got.abs()));
            }
        }
    }

    #[test]
    fn mode_layout_consistency() {
        let ok = ProblemSpec {
            mode: ProblemMode::Forward,
            layout: SensorLayout::uniform(13, 0, 21, 2).unwrap(),
            noise_dim: 4,
        };
        ok.validate().unwrap();
        assert_eq!(ok.snapshot_len(), 36);
        let bad = ProblemSpec {
            mode: ProblemMode::Inverse,
            ..ok.clone()
        };
        assert!(bad.validate().is_err());
    }
}
