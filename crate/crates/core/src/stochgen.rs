//! Ground-truth data: Gaussian-process paths, the reference elliptic solve,
//! sensor placement and snapshot datasets.
//!
//! # Dataset file format
//!
//! Plain text. A header of `key: value` lines, a `data:` line, then one
//! comma-separated row per snapshot with blocks in K, U, F, B order. Values
//! are written with 17 significant digits so a load reproduces every bit.
//!
//! ```text
//! format: gea-dataset-1
//! mode: forward
//! count: 1000
//! seed: 7
//! grid_nodes: 1001
//! k_hat: mean=0 variance=0.16 width=1
//! forcing: mean=0.5 variance=0.0225 width=0.04
//! coords_k: -1,-0.8333333333333334,...
//! coords_u:
//! coords_f: ...
//! coords_b: -1,1
//! data:
//! 1.0234...e0,...
//! ```
//!
//! `k_hat` is `none` for process datasets, which carry only an F block.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{gemm_nt, Matrix};

pub const DEFAULT_GRID_NODES: usize = 1001;

/// Smallest pool of sample paths that training epochs draw from.
pub const MIN_POOL_PATHS: usize = 1000;

/// Paths to pre-generate for a run drawing `snapshots` per epoch.
pub fn pool_size(snapshots: usize) -> usize {
    snapshots.max(MIN_POOL_PATHS)
}

/// Constant mean plus squared-exponential covariance `v·exp(−(x−x')²/w)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussKernelSpec {
    pub mean: f64,
    pub variance: f64,
    pub width: f64,
}

impl GaussKernelSpec {
    pub fn new(mean: f64, variance: f64, width: f64) -> Self {
        Self {
            mean,
            variance,
            width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || !self.width.is_finite() {
            return Err(Error::KernelWidth(self.width));
        }
        if !(self.variance >= 0.0) || !self.variance.is_finite() || !self.mean.is_finite() {
            return Err(Error::Config(format!("invalid kernel {self}")));
        }
        Ok(())
    }

    pub fn covariance(&self, x: f64, y: f64) -> f64 {
        let d = x - y;
        self.variance * (-d * d / self.width).exp()
    }
}

impl fmt::Display for GaussKernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mean={:?} variance={:?} width={:?}",
            self.mean, self.variance, self.width
        )
    }
}

impl FromStr for GaussKernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = GaussKernelSpec::new(f64::NAN, f64::NAN, f64::NAN);
        for field in s.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad kernel field {field:?}")))?;
            let value: f64 = value
                .parse()
                .map_err(|_| Error::Parse(format!("bad kernel value {field:?}")))?;
            match key {
                "mean" => spec.mean = value,
                "variance" => spec.variance = value,
                "width" => spec.width = value,
                _ => return Err(Error::Parse(format!("unknown kernel field {key:?}"))),
            }
        }
        if spec.mean.is_nan() || spec.variance.is_nan() || spec.width.is_nan() {
            return Err(Error::Parse(format!("incomplete kernel spec {s:?}")));
        }
        Ok(spec)
    }
}

pub fn gauss_kernel_matrix(spec: &GaussKernelSpec, coords: &[f64]) -> Result<Matrix> {
    spec.validate()?;
    let n = coords.len();
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        m.set(i, i, spec.variance);
        for j in 0..i {
            let c = spec.covariance(coords[i], coords[j]);
            m.set(i, j, c);
            m.set(j, i, c);
        }
    }
    Ok(m)
}

/// Factorized GP over a fixed coordinate set, reusable across draws.
#[derive(Clone, Debug)]
pub struct GpSampler {
    spec: GaussKernelSpec,
    /// Lower-triangular factor, row-major.
    factor: Matrix,
    jitter: f64,
}

impl GpSampler {
    pub fn new(spec: GaussKernelSpec, coords: &[f64]) -> Result<Self> {
        let cov = gauss_kernel_matrix(&spec, coords)?;
        let n = coords.len();
        if spec.variance == 0.0 {
            return Ok(Self {
                spec,
                factor: Matrix::zeros(n, n),
                jitter: 0.0,
            });
        }
        let mut jitter = 1e-10 * spec.variance;
        while jitter <= 1e-6 * spec.variance * (1.0 + 1e-9) {
            let mut a = DMatrix::from_row_slice(n, n, cov.data());
            for i in 0..n {
                a[(i, i)] += jitter;
            }
            if let Some(chol) = a.cholesky() {
                let l = chol.l();
                let factor = Matrix::from_fn(n, n, |i, j| l[(i, j)]);
                return Ok(Self {
                    spec,
                    factor,
                    jitter,
                });
            }
            jitter *= 10.0;
        }
        Err(Error::Factorization {
            jitter: jitter / 10.0,
        })
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.factor.rows()
    }

    /// `count x dim` paths. Path `i` draws its normals from its own stream of
    /// `seed`, so any prefix of paths is independent of `count`.
    pub fn sample(&self, count: usize, seed: u64) -> Matrix {
        let d = self.dim();
        let mut normals = Matrix::zeros(count, d);
        for i in 0..count {
            let mut rng = path_rng(seed, i as u64);
            for v in normals.row_mut(i) {
                *v = rng.sample(StandardNormal);
            }
        }
        let mut out = Matrix::filled(count, d, self.spec.mean);
        gemm_nt(&normals, &self.factor, &mut out, 1.0);
        out
    }
}

fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Mix a base seed with a tag into an unrelated seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` GP paths at `coords` as rows of a matrix.
pub fn sample_gp(spec: &GaussKernelSpec, coords: &[f64], count: usize, seed: u64) -> Result<Matrix> {
    Ok(GpSampler::new(*spec, coords)?.sample(count, seed))
}

/// Uniform nodes on [−1, 1] with both endpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FineGrid {
    nodes: usize,
}

impl FineGrid {
    pub fn new(nodes: usize) -> Result<Self> {
        if nodes < 3 {
            return Err(Error::Config("fine grid needs at least 3 nodes".into()));
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn spacing(&self) -> f64 {
        2.0 / (self.nodes - 1) as f64
    }

    pub fn coords(&self) -> Vec<f64> {
        uniform_sensors(self.nodes)
    }

    /// Linear interpolation of nodal values at `x`; exact at nodes.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let s = (x + 1.0) / self.spacing();
        let nearest = s.round();
        if (s - nearest).abs() < 1e-9 {
            return values[(nearest as usize).min(self.nodes - 1)];
        }
        let i = (s.floor() as usize).min(self.nodes - 2);
        let t = s - i as f64;
        (1.0 - t) * values[i] + t * values[i + 1]
    }
}

impl Default for FineGrid {
    fn default() -> Self {
        Self {
            nodes: DEFAULT_GRID_NODES,
        }
    }
}

/// Solve `−(1/10)(k u')' = f` on [−1, 1] with `u(±1) = 0`.
///
/// Conservative three-point scheme with `k` at half nodes taken as the
/// arithmetic mean of its neighbours; the tridiagonal system is eliminated
/// directly.
pub fn solve_elliptic(k: &[f64], f: &[f64]) -> Result<Vec<f64>> {
    let g = k.len();
    if f.len() != g {
        return Err(Error::dim(format!("k has {g} nodes, f has {}", f.len())));
    }
    if g < 3 {
        return Err(Error::Solver("need at least 3 nodes".into()));
    }
    if let Some(i) = k.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Solver(format!("coefficient not positive at node {i}: {}", k[i])));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver("non-finite forcing".into()));
    }
    let h = 2.0 / (g - 1) as f64;
    let m = g - 2;
    let half = |i: usize| 0.5 * (k[i] + k[i + 1]);

    // row r ↔ node r+1: -k₋ u_{r} + (k₋+k₊) u_{r+1} - k₊ u_{r+2} = 10 h² f
    let mut c_prime = vec![0.0; m];
    let mut d_prime = vec![0.0; m];
    for r in 0..m {
        let lo = half(r);
        let hi = half(r + 1);
        let rhs = 10.0 * h * h * f[r + 1];
        let (denom, d) = if r == 0 {
            (lo + hi, rhs)
        } else {
            (lo + hi + lo * c_prime[r - 1], rhs + lo * d_prime[r - 1])
        };
        if denom.abs() < f64::MIN_POSITIVE || !denom.is_finite() {
            return Err(Error::Solver(format!("singular pivot at node {}", r + 1)));
        }
        c_prime[r] = -hi / denom;
        d_prime[r] = d / denom;
    }
    let mut u = vec![0.0; g];
    for r in (0..m).rev() {
        u[r + 1] = d_prime[r] - c_prime[r] * u[r + 2];
    }
    Ok(u)
}

/// `n` equally spaced points on [−1, 1] including both ends.
pub fn uniform_sensors(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => {
            let last = (n - 1) as f64;
            (0..n)
                .map(|i| if i == n - 1 { 1.0 } else { -1.0 + 2.0 * i as f64 / last })
                .collect()
        }
    }
}

/// Sensor coordinates for each measured field.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SensorLayout {
    pub coords_k: Vec<f64>,
    pub coords_u: Vec<f64>,
    pub coords_f: Vec<f64>,
    pub coords_b: Vec<f64>,
}

impl SensorLayout {
    /// Uniform placement with `n_b` boundary points (0 or 2).
    pub fn uniform(n_k: usize, n_u: usize, n_f: usize, n_b: usize) -> Result<Self> {
        let coords_b = match n_b {
            0 => Vec::new(),
            2 => vec![-1.0, 1.0],
            _ => return Err(Error::Config(format!("boundary sensor count must be 0 or 2, got {n_b}"))),
        };
        let layout = Self {
            coords_k: uniform_sensors(n_k),
            coords_u: uniform_sensors(n_u),
            coords_f: uniform_sensors(n_f),
            coords_b,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn counts(&self) -> [usize; 4] {
        [
            self.coords_k.len(),
            self.coords_u.len(),
            self.coords_f.len(),
            self.coords_b.len(),
        ]
    }

    /// Length of a concatenated snapshot vector.
    pub fn total_len(&self) -> usize {
        self.counts().iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, c) in [
            ("k", &self.coords_k),
            ("u", &self.coords_u),
            ("f", &self.coords_f),
            ("b", &self.coords_b),
        ] {
            if c.iter().any(|x| !(-1.0..=1.0).contains(x)) {
                return Err(Error::Config(format!("{name} sensor outside [-1, 1]")));
            }
            if c.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!("{name} sensors not strictly ascending")));
            }
        }
        if self.coords_b.iter().any(|&x| x != -1.0 && x != 1.0) {
            return Err(Error::Config("boundary sensors must sit at -1 or 1".into()));
        }
        Ok(())
    }
}

/// One realization's sensor readings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Snapshot {
    pub k: Vec<f64>,
    pub u: Vec<f64>,
    pub f: Vec<f64>,
    pub b: Vec<f64>,
}

impl Snapshot {
    /// Blocks concatenated in K, U, F, B order.
    pub fn concat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.k.len() + self.u.len() + self.f.len() + self.b.len());
        v.extend_from_slice(&self.k);
        v.extend_from_slice(&self.u);
        v.extend_from_slice(&self.f);
        v.extend_from_slice(&self.b);
        v
    }

    pub fn from_concat(layout: &SensorLayout, row: &[f64]) -> Result<Self> {
        if row.len() != layout.total_len() {
            return Err(Error::dim(format!(
                "snapshot row has {} values, layout needs {}",
                row.len(),
                layout.total_len()
            )));
        }
        let [nk, nu, nf, _] = layout.counts();
        Ok(Self {
            k: row[..nk].to_vec(),
            u: row[nk..nk + nu].to_vec(),
            f: row[nk + nu..nk + nu + nf].to_vec(),
            b: row[nk + nu + nf..].to_vec(),
        })
    }

    fn matches(&self, layout: &SensorLayout) -> bool {
        [self.k.len(), self.u.len(), self.f.len(), self.b.len()] == layout.counts()
    }
}

/// Which experiment family a dataset or run belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProblemMode {
    /// Approximate a single stochastic process from its samples.
    Process,
    Forward,
    Inverse,
    Mixed,
    HighDim,
}

impl ProblemMode {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemMode::Process => "process",
            ProblemMode::Forward => "forward",
            ProblemMode::Inverse => "inverse",
            ProblemMode::Mixed => "mixed",
            ProblemMode::HighDim => "high-dim",
        }
    }

    pub fn is_process(&self) -> bool {
        *self == ProblemMode::Process
    }
}

impl fmt::Display for ProblemMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProblemMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "process" => ProblemMode::Process,
            "forward" => ProblemMode::Forward,
            "inverse" => ProblemMode::Inverse,
            "mixed" => ProblemMode::Mixed,
            "high-dim" | "highdim" => ProblemMode::HighDim,
            _ => return Err(Error::Parse(format!("unknown problem mode {s:?}"))),
        })
    }
}

/// Stochastic inputs of a data-generation run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataProblem {
    pub mode: ProblemMode,
    /// Perturbation of the log-coefficient; unused for process datasets.
    pub k_hat: Option<GaussKernelSpec>,
    /// Forcing process, or the process itself in process mode.
    pub forcing: GaussKernelSpec,
    pub grid: FineGrid,
}

impl DataProblem {
    /// The elliptic setting with the default coefficient and forcing kernels.
    pub fn elliptic(mode: ProblemMode, forcing_width: f64) -> Self {
        Self {
            mode,
            k_hat: Some(GaussKernelSpec::new(0.0, 4.0 / 25.0, 1.0)),
            forcing: GaussKernelSpec::new(0.5, 9.0 / 400.0, forcing_width),
            grid: FineGrid::default(),
        }
    }

    pub fn process(kernel: GaussKernelSpec) -> Self {
        Self {
            mode: ProblemMode::Process,
            k_hat: None,
            forcing: kernel,
            grid: FineGrid::default(),
        }
    }

    fn check_layout(&self, layout: &SensorLayout) -> Result<()> {
        layout.validate()?;
        let [nk, nu, nf, nb] = layout.counts();
        let bad = |msg: &str| Err(Error::Config(format!("{} layout: {msg}", self.mode)));
        match self.mode {
            ProblemMode::Process if nk + nu + nb > 0 || nf == 0 => {
                bad("process data has only f sensors")
            }
            ProblemMode::Forward | ProblemMode::HighDim if nu > 0 => {
                bad("no interior u sensors in a forward problem")
            }
            ProblemMode::Inverse if nk != 1 => bad("inverse problem has exactly one k sensor"),
            ProblemMode::Mixed if nk == 0 || nu == 0 => bad("mixed problem needs k and u sensors"),
            ProblemMode::Process => Ok(()),
            _ if self.k_hat.is_none() => bad("missing coefficient kernel"),
            _ => Ok(()),
        }
    }
}

/// The deterministic part of the log-coefficient.
pub fn log_coefficient_trend(x: f64) -> f64 {
    0.2 * (1.5 * std::f64::consts::PI * (x + 1.0)).sin()
}

/// Snapshots plus everything needed to regenerate them.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotSet {
    pub problem: DataProblem,
    pub layout: SensorLayout,
    pub seed: u64,
    pub snapshots: Vec<Snapshot>,
}

impl SnapshotSet {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// `N x D` matrix of concatenated snapshots.
    pub fn matrix(&self) -> Matrix {
        let d = self.layout.total_len();
        let mut data = Vec::with_capacity(self.len() * d);
        for s in &self.snapshots {
            data.extend(s.concat());
        }
        Matrix::from_vec(self.len(), d, data)
    }

    /// `N x n` matrix of one block (`'k'`, `'u'`, `'f'` or `'b'`).
    pub fn block(&self, field: char) -> Result<Matrix> {
        let pick = |s: &Snapshot| -> Result<Vec<f64>> {
            Ok(match field {
                'k' => s.k.clone(),
                'u' => s.u.clone(),
                'f' => s.f.clone(),
                'b' => s.b.clone(),
                _ => return Err(Error::Config(format!("unknown field {field:?}"))),
            })
        };
        let width = match field {
            'k' => self.layout.coords_k.len(),
            'u' => self.layout.coords_u.len(),
            'f' => self.layout.coords_f.len(),
            _ => self.layout.coords_b.len(),
        };
        let mut data = Vec::with_capacity(self.len() * width);
        for s in &self.snapshots {
            data.extend(pick(s)?);
        }
        Ok(Matrix::from_vec(self.len(), width, data))
    }
}

/// Generate `count` snapshots.
///
/// Process datasets sample the GP at the f sensors directly. Elliptic
/// datasets sample the log-coefficient perturbation and the forcing on the
/// fine grid, solve for u, and read every field at its sensors.
pub fn build_dataset(problem: &DataProblem, layout: &SensorLayout, count: usize, seed: u64) -> Result<SnapshotSet> {
    problem.check_layout(layout)?;
    let snapshots = if problem.mode.is_process() {
        let paths = sample_gp(&problem.forcing, &layout.coords_f, count, derive_seed(seed, 2))?;
        (0..count)
            .map(|j| Snapshot {
                f: paths.row(j).to_vec(),
                ..Default::default()
            })
            .collect()
    } else {
        let grid = problem.grid;
        let read = |values: &[f64], coords: &[f64]| -> Vec<f64> {
            coords.iter().map(|&x| grid.interpolate(values, x)).collect()
        };
        let mut snapshots = Vec::with_capacity(count);
        for_each_realization(problem, count, seed, |_, k, u, f| {
            snapshots.push(Snapshot {
                k: read(k, &layout.coords_k),
                u: read(u, &layout.coords_u),
                f: read(f, &layout.coords_f),
                b: read(u, &layout.coords_b),
            });
        })?;
        snapshots
    };
    Ok(SnapshotSet {
        problem: *problem,
        layout: layout.clone(),
        seed,
        snapshots,
    })
}

/// Visit `(index, k, u, f)` on the fine grid for each of `count` realizations.
fn for_each_realization<F>(problem: &DataProblem, count: usize, seed: u64, mut visit: F) -> Result<()>
where
    F: FnMut(usize, &[f64], &[f64], &[f64]),
{
    let k_hat = problem.k_hat.ok_or_else(|| Error::Config("missing coefficient kernel".into()))?;
    let xs = problem.grid.coords();
    let trend: Vec<f64> = xs.iter().map(|&x| log_coefficient_trend(x)).collect();
    let k_paths = sample_gp(&k_hat, &xs, count, derive_seed(seed, 1))?;
    let f_paths = sample_gp(&problem.forcing, &xs, count, derive_seed(seed, 2))?;
    for j in 0..count {
        let k: Vec<f64> = k_paths
            .row(j)
            .iter()
            .zip(&trend)
            .map(|(kh, t)| (t + kh).exp())
            .collect();
        let f = f_paths.row(j);
        let u = solve_elliptic(&k, f).map_err(|e| Error::Snapshot {
            index: j,
            source: Box::new(e),
        })?;
        visit(j, &k, &u, f);
    }
    Ok(())
}

/// Full fields read at common coordinates, one realization per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSamples {
    pub coords: Vec<f64>,
    /// Absent for process problems.
    pub k: Option<Matrix>,
    pub u: Option<Matrix>,
    pub f: Matrix,
}

/// Reference realizations of every field at `coords` (e.g. a test grid).
pub fn sample_fields(problem: &DataProblem, coords: &[f64], count: usize, seed: u64) -> Result<FieldSamples> {
    if problem.mode.is_process() {
        return Ok(FieldSamples {
            coords: coords.to_vec(),
            k: None,
            u: None,
            f: sample_gp(&problem.forcing, coords, count, derive_seed(seed, 2))?,
        });
    }
    let p = coords.len();
    let grid = problem.grid;
    let mut k = Matrix::zeros(count, p);
    let mut u = Matrix::zeros(count, p);
    let mut f = Matrix::zeros(count, p);
    for_each_realization(problem, count, seed, |j, kv, uv, fv| {
        for (i, &x) in coords.iter().enumerate() {
            k.set(j, i, grid.interpolate(kv, x));
            u.set(j, i, grid.interpolate(uv, x));
            f.set(j, i, grid.interpolate(fv, x));
        }
    })?;
    Ok(FieldSamples {
        coords: coords.to_vec(),
        k: Some(k),
        u: Some(u),
        f,
    })
}

const FORMAT_TAG: &str = "gea-dataset-1";

fn join(values: &[f64], full: bool) -> String {
    values
        .iter()
        .map(|v| if full { format!("{v:.16e}") } else { format!("{v:?}") })
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad number {t:?}")))
        })
        .collect()
}

pub fn dataset_to_string(set: &SnapshotSet) -> String {
    let p = &set.problem;
    let mut out = String::new();
    out.push_str(&format!("format: {FORMAT_TAG}\n"));
    out.push_str(&format!("mode: {}\n", p.mode));
    out.push_str(&format!("count: {}\n", set.len()));
    out.push_str(&format!("seed: {}\n", set.seed));
    out.push_str(&format!("grid_nodes: {}\n", p.grid.nodes()));
    match &p.k_hat {
        Some(k) => out.push_str(&format!("k_hat: {k}\n")),
        None => out.push_str("k_hat: none\n"),
    }
    out.push_str(&format!("forcing: {}\n", p.forcing));
    let l = &set.layout;
    out.push_str(&format!("coords_k: {}\n", join(&l.coords_k, false)));
    out.push_str(&format!("coords_u: {}\n", join(&l.coords_u, false)));
    out.push_str(&format!("coords_f: {}\n", join(&l.coords_f, false)));
    out.push_str(&format!("coords_b: {}\n", join(&l.coords_b, false)));
    out.push_str("data:\n");
    for s in &set.snapshots {
        out.push_str(&join(&s.concat(), true));
        out.push('\n');
    }
    out
}

pub fn dataset_from_str(text: &str) -> Result<SnapshotSet> {
    let mut lines = text.lines();
    let mut header = std::collections::HashMap::new();
    for line in lines.by_ref() {
        let line = line.trim_end();
        if line == "data:" {
            break;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("bad header line {line:?}")))?;
        header.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |key: &str| -> Result<&String> {
        header
            .get(key)
            .ok_or_else(|| Error::Parse(format!("dataset header lacks {key:?}")))
    };
    if get("format")? != FORMAT_TAG {
        return Err(Error::Parse(format!("unsupported dataset format {:?}", get("format")?)));
    }
    let parse_u = |key: &str| -> Result<u64> {
        get(key)?
            .parse()
            .map_err(|_| Error::Parse(format!("bad {key}")))
    };
    let mode: ProblemMode = get("mode")?.parse()?;
    let count = parse_u("count")? as usize;
    let seed = parse_u("seed")?;
    let grid = FineGrid::new(parse_u("grid_nodes")? as usize)?;
    let k_hat = match get("k_hat")?.as_str() {
        "none" => None,
        s => Some(s.parse()?),
    };
    let forcing = get("forcing")?.parse()?;
    let layout = SensorLayout {
        coords_k: parse_list(get("coords_k")?)?,
        coords_u: parse_list(get("coords_u")?)?,
        coords_f: parse_list(get("coords_f")?)?,
        coords_b: parse_list(get("coords_b")?)?,
    };
    layout.validate()?;
    let mut snapshots = Vec::with_capacity(count);
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row = parse_list(line)?;
        let snapshot = Snapshot::from_concat(&layout, &row)?;
        if snapshot.concat().iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse(format!("non-finite entry in row {}", snapshots.len())));
        }
        snapshots.push(snapshot);
    }
    if snapshots.len() != count {
        return Err(Error::Parse(format!(
            "header says {count} snapshots, found {}",
            snapshots.len()
        )));
    }
    debug_assert!(snapshots.iter().all(|s| s.matches(&layout)));
    Ok(SnapshotSet {
        problem: DataProblem {
            mode,
            k_hat,
            forcing,
            grid,
        },
        layout,
        seed,
        snapshots,
    })
}

pub fn write_dataset(path: &Path, set: &SnapshotSet) -> Result<()> {
    std::fs::write(path, dataset_to_string(set))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<SnapshotSet> {
    dataset_from_str(&std::fs::read_to_string(path)?)
}
