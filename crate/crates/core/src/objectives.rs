//! MMD estimator and the assembled encoder and generator objectives.

use crate::diff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// How kernel bandwidths are chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum BandwidthMode {
    /// Median pairwise squared distance of the pooled sets, times each multiplier.
    Median,
    /// Squared bandwidths used as given.
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmdConfig {
    pub mode: BandwidthMode,
    pub multipliers: Vec<f64>,
    /// Lower bound on every squared bandwidth.
    pub floor: f64,
}

impl Default for MmdConfig {
    fn default() -> Self {
        Self {
            mode: BandwidthMode::Median,
            multipliers: vec![0.5, 1.0, 2.0, 4.0, 8.0],
            floor: 1e-12,
        }
    }
}

impl MmdConfig {
    pub fn fixed(squared_bandwidths: Vec<f64>) -> Self {
        Self {
            mode: BandwidthMode::Fixed(squared_bandwidths),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let list = match &self.mode {
            BandwidthMode::Median => &self.multipliers,
            BandwidthMode::Fixed(b) => b,
        };
        if list.is_empty() {
            return Err(Error::Config("MMD needs at least one bandwidth".into()));
        }
        if list.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("MMD bandwidths and multipliers must be positive".into()));
        }
        if !(self.floor > 0.0) {
            return Err(Error::Config("MMD bandwidth floor must be positive".into()));
        }
        Ok(())
    }

    /// Squared bandwidths for comparing the rows of `x` with those of `y`.
    pub fn bandwidths(&self, x: &Matrix, y: &Matrix) -> Result<Vec<f64>> {
        self.validate()?;
        Ok(match &self.mode {
            BandwidthMode::Fixed(b) => b.iter().map(|&s| s.max(self.floor)).collect(),
            BandwidthMode::Median => {
                let median = median_sq_distance(x, y);
                self.multipliers
                    .iter()
                    .map(|&m| (m * median).max(self.floor))
                    .collect()
            }
        })
    }
}

/// Whether distribution-matching terms compare whole batches or index-aligned pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MmdGranularity {
    #[default]
    Batch,
    PerSample,
}

/// Median squared distance over all distinct pairs of rows of `x` and `y` pooled.
pub fn median_sq_distance(x: &Matrix, y: &Matrix) -> f64 {
    let rows: Vec<&[f64]> = (0..x.rows())
        .map(|i| x.row(i))
        .chain((0..y.rows()).map(|i| y.row(i)))
        .collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in 0..i {
            d.push(crate::diff::sq_dist(rows[i], rows[j]));
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, &mut hi, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if d.len() % 2 == 1 {
        hi
    } else {
        let lo = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

fn check_sets(g: &Graph, x: Var, y: Var) -> Result<()> {
    let (n, dx) = g.shape(x);
    let (m, dy) = g.shape(y);
    if n == 0 || m == 0 {
        return Err(Error::Empty("MMD sample set"));
    }
    if dx != dy {
        return Err(Error::dim(format!("MMD between {dx}- and {dy}-dimensional samples")));
    }
    Ok(())
}

/// Biased V-statistic MMD² between the row sets `x` and `y`, summed over bandwidths.
pub fn mmd_biased(g: &mut Graph, x: Var, y: Var, config: &MmdConfig) -> Result<Var> {
    check_sets(g, x, y)?;
    let bw = config.bandwidths(g.value(x), g.value(y))?;
    Ok(g.mmd(x, y, &bw))
}

/// Mean singleton MMD² between index-aligned rows of `x` and `y`.
pub fn pair_distance(g: &mut Graph, x: Var, y: Var, config: &MmdConfig) -> Result<Var> {
    check_sets(g, x, y)?;
    if g.shape(x).0 != g.shape(y).0 {
        return Err(Error::dim("paired sets differ in size"));
    }
    let bw = config.bandwidths(g.value(x), g.value(y))?;
    Ok(g.pair_mmd(x, y, &bw))
}

fn distribution_term(g: &mut Graph, x: Var, y: Var, config: &MmdConfig, gran: MmdGranularity) -> Result<Var> {
    match gran {
        MmdGranularity::Batch => mmd_biased(g, x, y, config),
        MmdGranularity::PerSample => pair_distance(g, x, y, config),
    }
}

/// One batch worth of graph nodes; every field has one row per snapshot.
#[derive(Clone, Copy, Debug)]
pub struct BatchBundle {
    pub real: Var,
    pub generated: Var,
    /// Snapshots regenerated from the real snapshots' own codes.
    pub reconstructed: Option<Var>,
    pub z_real: Option<Var>,
    pub z_gen: Var,
    pub z_prior: Var,
}

impl BatchBundle {
    fn check(&self, g: &Graph, need_encoder_terms: bool) -> Result<()> {
        let n = g.shape(self.real).0;
        if n == 0 {
            return Err(Error::Empty("batch"));
        }
        let mut sets = vec![self.generated, self.z_gen, self.z_prior];
        if need_encoder_terms {
            sets.push(self.reconstructed.ok_or(Error::Empty("reconstructed batch"))?);
            sets.push(self.z_real.ok_or(Error::Empty("real latent codes"))?);
        }
        if sets.iter().any(|&v| g.shape(v).0 != n) {
            return Err(Error::dim("batch members differ in count"));
        }
        let m = g.shape(self.z_prior).1;
        if g.shape(self.z_gen).1 != m || self.z_real.is_some_and(|z| g.shape(z).1 != m) {
            return Err(Error::dim("latent codes differ in dimension"));
        }
        Ok(())
    }
}

/// `MMD(z_gen, prior) + MMD(generated, real)`; minimized by the generators.
pub fn generator_objective(g: &mut Graph, bundle: &BatchBundle, config: &MmdConfig, gran: MmdGranularity) -> Result<Var> {
    bundle.check(g, false)?;
    let latent = distribution_term(g, bundle.z_gen, bundle.z_prior, config, gran)?;
    let data = distribution_term(g, bundle.generated, bundle.real, config, gran)?;
    Ok(g.add(latent, data))
}

/// `MMD(z_gen, prior) − MMD(z_real, prior) − mean pair distance(reconstructed, real)`;
/// maximized by the encoder.
pub fn encoder_objective(g: &mut Graph, bundle: &BatchBundle, config: &MmdConfig, gran: MmdGranularity) -> Result<Var> {
    bundle.check(g, true)?;
    let z_real = bundle.z_real.expect("checked");
    let recon = bundle.reconstructed.expect("checked");
    let fake = distribution_term(g, bundle.z_gen, bundle.z_prior, config, gran)?;
    let real = distribution_term(g, z_real, bundle.z_prior, config, gran)?;
    let rec = pair_distance(g, recon, bundle.real, config)?;
    let partial = g.sub(fake, real);
    Ok(g.sub(partial, rec))
}
