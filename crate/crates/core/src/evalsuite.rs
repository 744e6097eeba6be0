//! Distribution metrics and the checkpoint-averaged evaluation protocol.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nets::MlpParams;
use crate::stochgen::{derive_seed, uniform_sensors, FieldSamples};
use crate::tensor::{gemm_tn, Matrix};
use crate::trainer::{Model, Monitor};

/// Seed for subsampling when the two sample sets differ in size.
const SUBSAMPLE_SEED: u64 = 0x5eed;

/// W₁ between two 1-D empirical distributions via sorted samples.
///
/// The larger set is subsampled (seeded) to the size of the smaller one.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("Wasserstein sample set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SUBSAMPLE_SEED);
    let shrink = |v: &[f64], n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        if v.len() == n {
            v.to_vec()
        } else {
            let mut idx = sample(rng, v.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| v[i]).collect()
        }
    };
    let n = a.len().min(b.len());
    let mut a = shrink(a, n, &mut rng);
    let mut b = shrink(b, n, &mut rng);
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64)
}

/// Mean over columns of the W₁ distance between column marginals.
pub fn wasserstein_field(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::dim(format!("{} vs {} coordinates", a.cols(), b.cols())));
    }
    if a.cols() == 0 {
        return Err(Error::Empty("coordinates"));
    }
    let mut total = 0.0;
    for j in 0..a.cols() {
        total += wasserstein_1d(&a.column_values(j), &b.column_values(j))?;
    }
    Ok(total / a.cols() as f64)
}

/// Eigenvalues of the sample covariance (1/(N−1)) of the rows, descending.
pub fn pca_eigenvalues(x: &Matrix) -> Result<Vec<f64>> {
    let (n, m) = x.shape();
    if m == 0 {
        return Err(Error::Empty("observation dimension"));
    }
    if n < 2 {
        return Err(Error::Empty("observations (need at least 2)"));
    }
    let means: Vec<f64> = (0..m).map(|j| x.column_values(j).iter().sum::<f64>() / n as f64).collect();
    let centered = Matrix::from_fn(n, m, |i, j| x.get(i, j) - means[j]);
    let mut cov = Matrix::zeros(m, m);
    gemm_tn(&centered, &centered, &mut cov, 0.0);
    cov.scale_in_place(1.0 / (n - 1) as f64);
    let sym = DMatrix::from_fn(m, m, |i, j| 0.5 * (cov.get(i, j) + cov.get(j, i)));
    let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    Ok(ev)
}

/// Pointwise mean and standard deviation (1/(N−1)) over rows.
pub fn moment_curves(samples: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, p) = samples.shape();
    if n < 2 {
        return Err(Error::Empty("samples (need at least 2)"));
    }
    let mut mean = vec![0.0; p];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(samples.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; p];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(samples.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / (n - 1) as f64).sqrt()).collect();
    Ok((mean, std))
}

/// `‖estimate − reference‖₂ / ‖reference‖₂`.
pub fn relative_l2(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::dim(format!("{} vs {} points", estimate.len(), reference.len())));
    }
    let norm = reference.iter().map(|r| r * r).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroReference);
    }
    let diff = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| (e - r) * (e - r))
        .sum::<f64>()
        .sqrt();
    Ok(diff / norm)
}

/// Values of a `(x, z)` generator at `coords` for each latent row: `n x p`.
pub fn generator_field(params: &MlpParams, coords: &[f64], latent: &Matrix) -> Result<Matrix> {
    let (n, m) = latent.shape();
    if params.config().input_dim != 1 + m || params.config().output_dim != 1 {
        return Err(Error::dim("generator does not take (x, latent) to a scalar"));
    }
    let p = coords.len();
    let input = Matrix::from_fn(n * p, 1 + m, |r, c| if c == 0 { coords[r % p] } else { latent.get(r / p, c - 1) });
    Ok(params.forward_batch(&input)?.reshaped(n, p))
}

pub fn standard_normal_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub test_points: usize,
    pub test_samples: usize,
    pub reference_samples: usize,
    pub checkpoints: usize,
    /// Epochs at the end of training from which checkpoints are drawn.
    pub window: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_points: 101,
            test_samples: 1000,
            reference_samples: 1000,
            checkpoints: 30,
            window: 3000,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.test_points < 2 || self.test_samples < 2 || self.reference_samples < 2 {
            return Err(Error::Config("evaluation needs >= 2 test points and samples".into()));
        }
        if self.checkpoints == 0 {
            return Err(Error::Config("evaluation needs at least one checkpoint".into()));
        }
        Ok(())
    }

    pub fn test_coords(&self) -> Vec<f64> {
        uniform_sensors(self.test_points)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation; the deviation is 0 for a single value.
pub fn spread(values: &[f64]) -> Spread {
    let n = values.len();
    if n == 0 {
        return Spread { mean: f64::NAN, std: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Spread { mean, std }
}

/// Per-field results over the evaluated checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldReport {
    /// `'k'`, `'u'` or `'f'`.
    pub field: char,
    pub rel_err_mean: Vec<f64>,
    pub rel_err_std: Vec<f64>,
    pub rel_err_mean_summary: Spread,
    pub rel_err_std_summary: Spread,
    /// Curves averaged over checkpoints.
    pub mean_curve: Vec<f64>,
    pub std_curve: Vec<f64>,
    pub reference_mean: Vec<f64>,
    pub reference_std: Vec<f64>,
    /// From the newest evaluated checkpoint.
    pub eigenvalues_generated: Vec<f64>,
    pub eigenvalues_reference: Vec<f64>,
    pub wasserstein: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub test_coords: Vec<f64>,
    pub epochs: Vec<usize>,
    pub fields: Vec<FieldReport>,
    /// `(epoch, value)` pairs logged during training, if any.
    pub wasserstein_curve: Vec<(usize, f64)>,
}

impl MetricsReport {
    pub fn field(&self, field: char) -> Option<&FieldReport> {
        self.fields.iter().find(|f| f.field == field)
    }
}

/// A source of generated samples on the test grid.
pub trait SampleSource {
    /// Generated values of `field` at `coords`, one row per latent row.
    fn field_samples(&self, field: char, coords: &[f64], latent: &Matrix) -> Result<Matrix>;
    fn noise_dim(&self) -> usize;
}

impl SampleSource for Model {
    fn field_samples(&self, field: char, coords: &[f64], latent: &Matrix) -> Result<Matrix> {
        let net = match (self.generators.len(), field) {
            (1, 'f') => &self.generators[0],
            (2, 'k') => &self.generators[0],
            (2, 'u') => &self.generators[1],
            _ => return Err(Error::Config(format!("model has no generator for field {field:?}"))),
        };
        generator_field(net, coords, latent)
    }

    fn noise_dim(&self) -> usize {
        self.encoder.config().output_dim
    }
}

fn reference_block(reference: &FieldSamples, field: char) -> Result<&Matrix> {
    match field {
        'k' => reference.k.as_ref().ok_or(Error::MissingReference("k")),
        'u' => reference.u.as_ref().ok_or(Error::MissingReference("u")),
        'f' => Ok(&reference.f),
        _ => Err(Error::Config(format!("unknown field {field:?}"))),
    }
}

/// Evaluate `(epoch, source)` checkpoints against reference samples on the
/// test grid for each requested field.
pub fn evaluate_generator<S: SampleSource>(checkpoints: &[(usize, &S)], fields: &[char], eval: &EvalConfig, reference: &FieldSamples) -> Result<MetricsReport> {
    eval.validate()?;
    if checkpoints.is_empty() {
        return Err(Error::Empty("checkpoints"));
    }
    let coords = eval.test_coords();
    if reference.coords.len() != coords.len() || reference.coords.iter().zip(&coords).any(|(a, b)| (a - b).abs() > 1e-12) {
        return Err(Error::dim("reference samples are not on the test grid"));
    }
    let mut reports = Vec::with_capacity(fields.len());
    for &field in fields {
        let reference = reference_block(reference, field)?;
        let (ref_mean, ref_std) = moment_curves(reference)?;
        let p = coords.len();
        let (mut err_mean, mut err_std) = (Vec::new(), Vec::new());
        let (mut mean_acc, mut std_acc) = (vec![0.0; p], vec![0.0; p]);
        let mut last_samples = None;
        for &(epoch, source) in checkpoints {
            let latent = standard_normal_matrix(eval.test_samples, source.noise_dim(), derive_seed(eval.seed, epoch as u64));
            let samples = source.field_samples(field, &coords, &latent)?;
            let (mean, std) = moment_curves(&samples)?;
            err_mean.push(relative_l2(&mean, &ref_mean)?);
            err_std.push(relative_l2(&std, &ref_std)?);
            mean_acc.iter_mut().zip(&mean).for_each(|(a, v)| *a += v);
            std_acc.iter_mut().zip(&std).for_each(|(a, v)| *a += v);
            last_samples = Some(samples);
        }
        let k = checkpoints.len() as f64;
        let last = last_samples.expect("nonempty");
        reports.push(FieldReport {
            field,
            rel_err_mean_summary: spread(&err_mean),
            rel_err_std_summary: spread(&err_std),
            rel_err_mean: err_mean,
            rel_err_std: err_std,
            mean_curve: mean_acc.into_iter().map(|v| v / k).collect(),
            std_curve: std_acc.into_iter().map(|v| v / k).collect(),
            reference_mean: ref_mean,
            reference_std: ref_std,
            eigenvalues_generated: pca_eigenvalues(&last)?,
            eigenvalues_reference: pca_eigenvalues(reference)?,
            wasserstein: wasserstein_field(&last, reference)?,
        });
    }
    Ok(MetricsReport {
        test_coords: coords,
        epochs: checkpoints.iter().map(|(e, _)| *e).collect(),
        fields: reports,
        wasserstein_curve: Vec::new(),
    })
}

/// Logs the field Wasserstein distance of a process generator at the
/// sensors against reference samples, every `every` epochs.
pub struct WassersteinMonitor {
    coords: Vec<f64>,
    reference: Matrix,
    samples: usize,
    every: usize,
    seed: u64,
    pub curve: Vec<(usize, f64)>,
}

impl WassersteinMonitor {
    pub fn new(coords: Vec<f64>, reference: Matrix, samples: usize, every: usize, seed: u64) -> Result<Self> {
        if reference.cols() != coords.len() {
            return Err(Error::dim("reference samples do not match the sensors"));
        }
        Ok(Self {
            coords,
            reference,
            samples,
            every: every.max(1),
            seed,
            curve: Vec::new(),
        })
    }
}

impl Monitor for WassersteinMonitor {
    fn on_epoch(&mut self, epoch: usize, model: &Model) -> Result<()> {
        if !epoch.is_multiple_of(self.every) {
            return Ok(());
        }
        let latent = standard_normal_matrix(self.samples, model.noise_dim(), derive_seed(self.seed, epoch as u64));
        let generated = model.field_samples('f', &self.coords, &latent)?;
        self.curve.push((epoch, wasserstein_field(&generated, &self.reference)?));
        Ok(())
    }
}

/// Forward every hook to each monitor in turn.
pub struct Chain<'a>(pub Vec<&'a mut dyn Monitor>);

impl Monitor for Chain<'_> {
    fn on_step(&mut self, epoch: usize, batch: usize, kind: crate::trainer::StepKind) {
        self.0.iter_mut().for_each(|m| m.on_step(epoch, batch, kind));
    }
    fn on_batch(&mut self, record: &crate::trainer::LossRecord) {
        self.0.iter_mut().for_each(|m| m.on_batch(record));
    }
    fn on_epoch(&mut self, epoch: usize, model: &Model) -> Result<()> {
        self.0.iter_mut().try_for_each(|m| m.on_epoch(epoch, model))
    }
    fn on_checkpoint(&mut self, record: &crate::trainer::CheckpointRecord) -> Result<()> {
        self.0.iter_mut().try_for_each(|m| m.on_checkpoint(record))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochgen::{sample_gp, GaussKernelSpec};

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein_1d(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein_1d(&[3.0, -1.0, 2.0], &[2.0, 3.0, -1.0]).unwrap(), 0.0);
        assert_eq!(wasserstein_1d(&[0.0, 1.0], &[0.5, 1.5]).unwrap(), 0.5);
        assert!(wasserstein_1d(&[], &[1.0]).is_err());
    }

    #[test]
    fn unequal_sizes_subsample() {
        let a: Vec<f64> = (0..10).map(f64::from).collect();
        let b = vec![100.0; 4];
        let w = wasserstein_1d(&a, &b).unwrap();
        assert!(w > 90.0 && w <= 100.0);
        assert_eq!(w, wasserstein_1d(&a, &b).unwrap());
    }

    #[test]
    fn field_examples() {
        let a = Matrix::from_fn(20, 3, |i, j| (i * 7 % 5) as f64 + j as f64);
        assert_eq!(wasserstein_field(&a, &a).unwrap(), 0.0);
        let shifted = a.map(|v| v + 0.75);
        assert!((wasserstein_field(&a, &shifted).unwrap() - 0.75).abs() < 1e-12);
        let col = Matrix::column(&a.column_values(1));
        let col2 = Matrix::column(&shifted.column_values(0));
        assert_eq!(
            wasserstein_field(&col, &col2).unwrap(),
            wasserstein_1d(&a.column_values(1), &shifted.column_values(0)).unwrap()
        );
        assert!(wasserstein_field(&a, &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn pca_examples() {
        let c = Matrix::filled(5, 3, 2.5);
        assert!(pca_eigenvalues(&c).unwrap().iter().all(|v| v.abs() < 1e-15));
        let two = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let ev = pca_eigenvalues(&two).unwrap();
        assert!((ev[0] - 2.0).abs() < 1e-14 && ev[1].abs() < 1e-14);
        assert!(pca_eigenvalues(&Matrix::zeros(4, 0)).is_err());
    }

    #[test]
    fn pca_monte_carlo() {
        let n = 100_000;
        let z = standard_normal_matrix(n, 2, 3);
        let x = Matrix::from_fn(n, 2, |i, j| z.get(i, j) * if j == 0 { 2.0 } else { 1.0 });
        let ev = pca_eigenvalues(&x).unwrap();
        assert!((ev[0] / 4.0 - 1.0).abs() < 0.05 && (ev[1] - 1.0).abs() < 0.05, "{ev:?}");
    }

    #[test]
    fn moment_examples() {
        let same = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        let (m, s) = moment_curves(&same).unwrap();
        assert_eq!(m, vec![1.0, 2.0]);
        assert_eq!(s, vec![0.0, 0.0]);
        let (m, s) = moment_curves(&Matrix::column(&[0.0, 2.0])).unwrap();
        assert_eq!(m, vec![1.0]);
        assert!((s[0] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn gp_variance_recovered() {
        let p = sample_gp(&GaussKernelSpec::new(0.0, 0.16, 1.0), &[-0.4, 0.6], 100_000, 1).unwrap();
        let (_, s) = moment_curves(&p).unwrap();
        assert!(s.iter().all(|v| (v * v / 0.16 - 1.0).abs() < 0.05));
    }

    #[test]
    fn relative_l2_examples() {
        assert_eq!(relative_l2(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(relative_l2(&[2.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert!((relative_l2(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(matches!(relative_l2(&[1.0], &[0.0]), Err(Error::ZeroReference)));
    }

    /// Replays rows of a stored sample bank instead of running a network.
    struct Replay {
        bank: Matrix,
    }

    impl SampleSource for Replay {
        fn field_samples(&self, _: char, _: &[f64], latent: &Matrix) -> Result<Matrix> {
            // the latent draw picks which rows to replay
            let n = self.bank.rows();
            Ok(Matrix::from_fn(latent.rows(), self.bank.cols(), |i, j| {
                let pick = ((latent.get(i, 0).abs() * 1e6) as usize + i) % n;
                self.bank.get(pick, j)
            }))
        }
        fn noise_dim(&self) -> usize {
            1
        }
    }

    #[test]
    fn replayed_reference_scores_within_statistical_tolerance() {
        let eval = EvalConfig {
            checkpoints: 3,
            ..EvalConfig::default()
        };
        let coords = eval.test_coords();
        let spec = GaussKernelSpec::new(0.5, 9.0 / 400.0, 1.0 / 25.0);
        let reference = FieldSamples {
            coords: coords.clone(),
            k: None,
            u: None,
            f: sample_gp(&spec, &coords, 1000, 1).unwrap(),
        };
        let replay = Replay {
            bank: sample_gp(&spec, &coords, 5000, 2).unwrap(),
        };
        let cps = [(10, &replay), (20, &replay), (30, &replay)];
        let report = evaluate_generator(&cps, &['f'], &eval, &reference).unwrap();
        let f = report.field('f').unwrap();
        assert_eq!(f.mean_curve.len(), 101);
        assert_eq!(f.rel_err_mean.len(), 3);
        let tol = 3.0 / 1000f64.sqrt();
        assert!(f.rel_err_mean.iter().chain(&f.rel_err_std).all(|&e| e < tol), "{f:?}");
        assert_eq!(report, evaluate_generator(&cps, &['f'], &eval, &reference).unwrap());
        assert!(matches!(
            evaluate_generator(&cps, &['u'], &eval, &reference),
            Err(Error::MissingReference("u"))
        ));
    }


    mod props {
        use super::*;
        use proptest::prelude::*;

        fn samples() -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-100.0f64..100.0, 1..40)
        }

        proptest! {
            #[test]
            fn w1_is_symmetric_and_nonnegative(a in samples(), b in samples()) {
                let ab = wasserstein_1d(&a, &b).unwrap();
                prop_assert!(ab >= 0.0);
                prop_assert_eq!(ab, wasserstein_1d(&b, &a).unwrap());
            }

            #[test]
            fn w1_of_a_shift_is_the_shift(a in samples(), c in -10.0f64..10.0) {
                let b: Vec<f64> = a.iter().map(|x| x + c).collect();
                let w = wasserstein_1d(&a, &b).unwrap();
                prop_assert!((w - c.abs()).abs() <= 1e-12 * 200.0);
            }

            #[test]
            fn w1_ignores_sample_order(a in samples(), seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                let mut b = a.clone();
                b.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                prop_assert_eq!(wasserstein_1d(&a, &b).unwrap(), 0.0);
            }

            #[test]
            fn spread_of_a_constant(v in -1e6f64..1e6, n in 1usize..50) {
                let s = spread(&vec![v; n]);
                prop_assert!((s.mean - v).abs() <= 1e-9 * v.abs().max(1.0));
                prop_assert!(s.std <= 1e-9 * v.abs().max(1.0));
            }
        }
    }
}
