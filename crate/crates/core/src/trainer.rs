//! Alternating encoder-ascent / generator-descent training, optimizers and
//! checkpoint storage.
//!
//! # Checkpoint directory
//!
//! ```text
//! <dir>/ckpt-<epoch, 6 digits>.bin   one file per saved epoch (nets format)
//! <dir>/losses.csv                   epoch,batch,encoder_objective,generator_objective
//! <dir>/manifest.txt                 config (key = value), config_sha256, seed, epochs=<list>
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::diff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nets::{init_mlp, read_checkpoint, write_checkpoint, Checkpoint, GraphMlp, joint_gradient, MlpConfig, MlpParams};
use crate::objectives::{encoder_objective, generator_objective, BatchBundle, MmdConfig, MmdGranularity};
use crate::physics::{process_snapshot, synthetic_snapshot, ProblemSpec};
use crate::stochgen::{derive_seed, SnapshotSet};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    #[default]
    Adam,
    PlainSgd,
}

/// How each epoch's snapshots are drawn from the stored pool.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ResampleMode {
    /// Distinct snapshots from the pool, shuffled.
    #[default]
    Pool,
    /// Independent draws with replacement.
    Replacement,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetShape {
    pub hidden_layers: usize,
    pub hidden_width: usize,
}

impl NetShape {
    pub fn new(hidden_layers: usize, hidden_width: usize) -> Self {
        Self {
            hidden_layers,
            hidden_width,
        }
    }

    pub fn mlp(&self, input_dim: usize, output_dim: usize) -> MlpConfig {
        MlpConfig::new(input_dim, output_dim, self.hidden_layers, self.hidden_width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Snapshots drawn per epoch (N).
    pub snapshots: usize,
    pub learning_rate: f64,
    pub noise_dim: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub checkpoint_cadence: usize,
    pub mmd: MmdConfig,
    pub granularity: MmdGranularity,
    pub resample: ResampleMode,
    pub optimizer: OptimizerKind,
    /// Draw new noise for the generator step instead of reusing the encoder step's.
    pub fresh_noise: bool,
    pub generator: NetShape,
    pub encoder: NetShape,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10_000,
            batch_size: 500,
            snapshots: 1000,
            learning_rate: 1e-4,
            noise_dim: 4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            checkpoint_cadence: 100,
            mmd: MmdConfig::default(),
            granularity: MmdGranularity::Batch,
            resample: ResampleMode::Pool,
            optimizer: OptimizerKind::Adam,
            fresh_noise: false,
            generator: NetShape::new(4, 128),
            encoder: NetShape::new(4, 128),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 {
            return fail("epochs must be >= 1");
        }
        if self.batch_size == 0 || self.batch_size > self.snapshots {
            return fail("batch size must be in 1..=snapshots");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail("learning rate must be positive");
        }
        if self.noise_dim == 0 {
            return fail("noise dimension must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return fail("optimizer moments must lie in [0, 1) with positive epsilon");
        }
        if self.checkpoint_cadence == 0 {
            return fail("checkpoint cadence must be >= 1");
        }
        self.mmd.validate()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.snapshots / self.batch_size
    }

    /// `key = value` lines, stable across runs; hashed into the manifest.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("snapshots", self.snapshots.to_string());
        kv("learning_rate", format!("{:?}", self.learning_rate));
        kv("noise_dim", self.noise_dim.to_string());
        kv("beta1", format!("{:?}", self.beta1));
        kv("beta2", format!("{:?}", self.beta2));
        kv("epsilon", format!("{:?}", self.epsilon));
        kv("seed", self.seed.to_string());
        kv("checkpoint_cadence", self.checkpoint_cadence.to_string());
        match &self.mmd.mode {
            crate::objectives::BandwidthMode::Median => kv("mmd_bandwidth", "median".into()),
            crate::objectives::BandwidthMode::Fixed(b) => kv("mmd_bandwidth", list(b)),
        }
        kv("mmd_multipliers", list(&self.mmd.multipliers));
        kv("mmd_floor", format!("{:?}", self.mmd.floor));
        kv(
            "mmd_granularity",
            match self.granularity {
                MmdGranularity::Batch => "batch",
                MmdGranularity::PerSample => "per-sample",
            }
            .into(),
        );
        kv(
            "resample",
            match self.resample {
                ResampleMode::Pool => "pool",
                ResampleMode::Replacement => "replacement",
            }
            .into(),
        );
        kv(
            "optimizer",
            match self.optimizer {
                OptimizerKind::Adam => "adam",
                OptimizerKind::PlainSgd => "plain-sgd",
            }
            .into(),
        );
        kv("fresh_noise", self.fresh_noise.to_string());
        kv("gen_hidden_layers", self.generator.hidden_layers.to_string());
        kv("gen_hidden_width", self.generator.hidden_width.to_string());
        kv("enc_hidden_layers", self.encoder.hidden_layers.to_string());
        kv("enc_hidden_width", self.encoder.hidden_width.to_string());
        s
    }
}

fn list(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

/// Adaptive-moment accumulators for one parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

fn check_grads(params: &[f64], grads: &[f64], state_len: usize) -> Result<()> {
    if params.len() != grads.len() || params.len() != state_len {
        return Err(Error::dim(format!(
            "{} parameters, {} gradients, optimizer state for {}",
            params.len(),
            grads.len(),
            state_len
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteParameterGradient(i));
    }
    Ok(())
}

/// One bias-corrected Adam descent step.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
    check_grads(params, grads, state.m.len())?;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Plain gradient descent; the step counter still advances.
pub fn sgd_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, lr: f64) -> Result<()> {
    check_grads(params, grads, state.m.len())?;
    state.t += 1;
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

/// Generator(s) plus encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub generators: Vec<MlpParams>,
    pub encoder: MlpParams,
}

impl Model {
    pub fn generator_names(&self) -> &'static [&'static str] {
        if self.generators.len() == 1 {
            &["generator"]
        } else {
            &["gen_k", "gen_u"]
        }
    }

    pub fn to_checkpoint(&self, epoch: u64, seed: u64) -> Checkpoint {
        let mut nets: Vec<(String, MlpParams)> = self
            .generator_names()
            .iter()
            .zip(&self.generators)
            .map(|(n, p)| (n.to_string(), p.clone()))
            .collect();
        nets.push(("encoder".into(), self.encoder.clone()));
        Checkpoint { epoch, seed, nets }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let find = |name: &str| {
            ck.nets
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, p)| p.clone())
                .ok_or_else(|| Error::Parse(format!("checkpoint lacks network {name:?}")))
        };
        let generators = if ck.nets.iter().any(|(n, _)| n == "generator") {
            vec![find("generator")?]
        } else {
            vec![find("gen_k")?, find("gen_u")?]
        };
        Ok(Self {
            generators,
            encoder: find("encoder")?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.generators.iter().map(MlpParams::len).sum::<usize>() + self.encoder.len()
    }
}

/// What the generators produce.
#[derive(Clone, Debug, PartialEq)]
pub enum Task {
    /// One generator read at the sensors.
    Process { coords: Vec<f64> },
    /// Coefficient and solution generators composed with the operator.
    Sde(ProblemSpec),
}

impl Task {
    pub fn snapshot_len(&self) -> usize {
        match self {
            Task::Process { coords } => coords.len(),
            Task::Sde(p) => p.snapshot_len(),
        }
    }

    fn generator_count(&self) -> usize {
        match self {
            Task::Process { .. } => 1,
            Task::Sde(_) => 2,
        }
    }

    /// Snapshot rows for each latent row.
    pub fn snapshots(&self, g: &mut Graph, gens: &[GraphMlp], latent: Var) -> Result<Var> {
        match self {
            Task::Process { coords } => process_snapshot(g, &gens[0], coords, latent),
            Task::Sde(p) => synthetic_snapshot(g, &gens[0], &gens[1], &p.layout, latent),
        }
    }

    /// Plain evaluation of the snapshots for the given latent rows.
    pub fn generate(&self, model: &Model, latent: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let gens: Vec<GraphMlp> = model.generators.iter().map(|p| GraphMlp::bind(&mut g, p, false)).collect();
        let z = g.constant(latent.clone());
        let s = self.snapshots(&mut g, &gens, z)?;
        Ok(g.value(s).clone())
    }
}

/// Fresh networks for `task`, seeded from `config.seed`.
pub fn init_model(task: &Task, config: &TrainConfig) -> Result<Model> {
    let m = config.noise_dim;
    let gen_cfg = config.generator.mlp(1 + m, 1);
    let enc_cfg = config.encoder.mlp(task.snapshot_len(), m);
    let generators = (0..task.generator_count())
        .map(|i| init_mlp(gen_cfg, derive_seed(config.seed, 100 + i as u64)))
        .collect::<Result<_>>()?;
    Ok(Model {
        generators,
        encoder: init_mlp(enc_cfg, derive_seed(config.seed, 200))?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    /// Encoder objective before its ascent step.
    pub encoder: f64,
    /// Generator objective before its descent step.
    pub generator: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Encoder,
    Generator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub model: Model,
}

/// Saved models in epoch order plus the run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointStore {
    pub config: TrainConfig,
    pub records: Vec<CheckpointRecord>,
}

impl CheckpointStore {
    pub fn epochs(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.epoch).collect()
    }

    pub fn get(&self, epoch: usize) -> Option<&CheckpointRecord> {
        self.records.iter().find(|r| r.epoch == epoch)
    }

    pub fn last(&self) -> Option<&CheckpointRecord> {
        self.records.last()
    }

    fn push(&mut self, record: CheckpointRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.epoch < record.epoch));
        self.records.push(record);
    }
}

/// Hooks into the training loop; every method defaults to a no-op.
pub trait Monitor {
    fn on_step(&mut self, _epoch: usize, _batch: usize, _kind: StepKind) {}
    fn on_batch(&mut self, _record: &LossRecord) {}
    fn on_epoch(&mut self, _epoch: usize, _model: &Model) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _record: &CheckpointRecord) -> Result<()> {
        Ok(())
    }
}

impl Monitor for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub store: CheckpointStore,
    pub losses: Vec<LossRecord>,
    pub model: Model,
}

fn standard_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Training state for one run.
pub struct Trainer {
    task: Task,
    config: TrainConfig,
    model: Model,
    enc_state: OptimizerState,
    gen_states: Vec<OptimizerState>,
    rng: ChaCha8Rng,
}

/// Generator graph kept from the encoder step for reuse in the generator step.
struct GeneratorPass {
    graph: Graph,
    gens: Vec<GraphMlp>,
    generated: Var,
}

impl Trainer {
    pub fn new(task: Task, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if let Task::Sde(p) = &task {
            p.validate()?;
            if p.noise_dim != config.noise_dim {
                return Err(Error::Config("problem and training noise dimensions differ".into()));
            }
        }
        let model = init_model(&task, &config)?;
        Self::with_model(task, config, model)
    }

    pub fn with_model(task: Task, config: TrainConfig, model: Model) -> Result<Self> {
        config.validate()?;
        if model.encoder.config().input_dim != task.snapshot_len() || model.generators.len() != task.generator_count() {
            return Err(Error::Config("model does not fit the task".into()));
        }
        Ok(Self {
            enc_state: OptimizerState::new(model.encoder.len()),
            gen_states: model.generators.iter().map(|p| OptimizerState::new(p.len())).collect(),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 300)),
            task,
            config,
            model,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn apply(c: &TrainConfig, params: &mut [f64], grads: &[f64], state: &mut OptimizerState) -> Result<()> {
        match c.optimizer {
            OptimizerKind::Adam => adam_step(params, grads, state, c.learning_rate, c.beta1, c.beta2, c.epsilon),
            OptimizerKind::PlainSgd => sgd_step(params, grads, state, c.learning_rate),
        }
    }

    fn generator_pass(&self, noise: &Matrix) -> Result<GeneratorPass> {
        let mut graph = Graph::new();
        let gens: Vec<GraphMlp> = self
            .model
            .generators
            .iter()
            .map(|p| GraphMlp::bind(&mut graph, p, true))
            .collect();
        let xi = graph.constant(noise.clone());
        let generated = self.task.snapshots(&mut graph, &gens, xi)?;
        Ok(GeneratorPass { graph, gens, generated })
    }

    /// Encoder objective on a frozen batch, without updating anything.
    pub fn encoder_objective_value(&self, real: &Matrix, generated: &Matrix, prior: &Matrix) -> Result<f64> {
        let (g, obj, _) = self.encoder_graph(real, generated, prior)?;
        Ok(g.scalar(obj))
    }

    fn encoder_graph(&self, real: &Matrix, generated: &Matrix, prior: &Matrix) -> Result<(Graph, Var, GraphMlp)> {
        let mut g = Graph::new();
        let enc = GraphMlp::bind(&mut g, &self.model.encoder, true);
        let gens: Vec<GraphMlp> = self
            .model
            .generators
            .iter()
            .map(|p| GraphMlp::bind(&mut g, p, false))
            .collect();
        let h = g.constant(real.clone());
        let h_gen = g.constant(generated.clone());
        let z_prior = g.constant(prior.clone());
        let z_real = enc.forward(&mut g, h)?;
        let reconstructed = self.task.snapshots(&mut g, &gens, z_real)?;
        let z_gen = enc.forward(&mut g, h_gen)?;
        let bundle = BatchBundle {
            real: h,
            generated: h_gen,
            reconstructed: Some(reconstructed),
            z_real: Some(z_real),
            z_gen,
            z_prior,
        };
        let obj = encoder_objective(&mut g, &bundle, &self.config.mmd, self.config.granularity)?;
        Ok((g, obj, enc))
    }

    /// Ascend the encoder objective once; returns its value before the step.
    pub fn encoder_step(&mut self, real: &Matrix, generated: &Matrix, prior: &Matrix) -> Result<f64> {
        let (g, obj, enc) = self.encoder_graph(real, generated, prior)?;
        let value = g.scalar(obj);
        let ascent: Vec<f64> = enc.gradient(&g, obj)?.into_iter().map(|x| -x).collect();
        Self::apply(&self.config, self.model.encoder.flat_mut(), &ascent, &mut self.enc_state)?;
        Ok(value)
    }

    /// Descend the generator objective once using a prepared generator pass.
    fn generator_step_with(&mut self, mut pass: GeneratorPass, real: &Matrix, prior: &Matrix) -> Result<f64> {
        let g = &mut pass.graph;
        let enc = GraphMlp::bind(g, &self.model.encoder, false);
        let h = g.constant(real.clone());
        let z_prior = g.constant(prior.clone());
        let z_gen = enc.forward(g, pass.generated)?;
        let bundle = BatchBundle {
            real: h,
            generated: pass.generated,
            reconstructed: None,
            z_real: None,
            z_gen,
            z_prior,
        };
        let obj = generator_objective(g, &bundle, &self.config.mmd, self.config.granularity)?;
        let value = g.scalar(obj);
        let grads = joint_gradient(g, obj, &pass.gens)?;
        for (i, grad) in grads.iter().enumerate() {
            Self::apply(&self.config, self.model.generators[i].flat_mut(), grad, &mut self.gen_states[i])?;
        }
        Ok(value)
    }

    /// Descend the generator objective once for the given noise batch.
    pub fn generator_step(&mut self, real: &Matrix, noise: &Matrix, prior: &Matrix) -> Result<f64> {
        let pass = self.generator_pass(noise)?;
        self.generator_step_with(pass, real, prior)
    }

    /// One alternation on a batch of real snapshots: encoder ascent, then
    /// generator descent.
    pub fn train_batch(&mut self, real: &Matrix, epoch: usize, batch: usize, monitor: &mut dyn Monitor) -> Result<LossRecord> {
        let n = real.rows();
        let m = self.config.noise_dim;
        let xi = standard_normal(&mut self.rng, n, m);
        let prior_enc = standard_normal(&mut self.rng, n, m);

        // Generator parameters do not change during the encoder step, so the
        // generated batch computed here is reused below with the same noise.
        let pass = self.generator_pass(&xi)?;
        let generated = pass.graph.value(pass.generated).clone();

        monitor.on_step(epoch, batch, StepKind::Encoder);
        let encoder = self.encoder_step(real, &generated, &prior_enc).map_err(|e| diverged(e, "encoder", epoch, batch))?;

        let prior_gen = standard_normal(&mut self.rng, n, m);
        let pass = if self.config.fresh_noise {
            drop(pass);
            let xi = standard_normal(&mut self.rng, n, m);
            self.generator_pass(&xi)?
        } else {
            pass
        };
        monitor.on_step(epoch, batch, StepKind::Generator);
        let generator = self
            .generator_step_with(pass, real, &prior_gen)
            .map_err(|e| diverged(e, "generator", epoch, batch))?;

        let record = LossRecord {
            epoch,
            batch,
            encoder,
            generator,
        };
        monitor.on_batch(&record);
        Ok(record)
    }

    /// Indices into the pool for one epoch.
    fn epoch_indices(&mut self, pool: usize) -> Vec<usize> {
        let n = self.config.snapshots;
        match self.config.resample {
            ResampleMode::Pool => {
                let mut idx: Vec<usize> = (0..pool).collect();
                let (head, _) = idx.partial_shuffle(&mut self.rng, n.min(pool));
                head.to_vec()
            }
            ResampleMode::Replacement => (0..n).map(|_| self.rng.random_range(0..pool)).collect(),
        }
    }

    /// Run all epochs over `pool` (one concatenated snapshot per row).
    pub fn run(mut self, pool: &Matrix, monitor: &mut dyn Monitor) -> Result<TrainOutcome> {
        if pool.cols() != self.task.snapshot_len() {
            return Err(Error::dim(format!(
                "dataset rows have {} values, task expects {}",
                pool.cols(),
                self.task.snapshot_len()
            )));
        }
        if pool.rows() < self.config.snapshots && self.config.resample == ResampleMode::Pool {
            return Err(Error::Config(format!(
                "pool holds {} snapshots, {} requested per epoch",
                pool.rows(),
                self.config.snapshots
            )));
        }
        let mut store = CheckpointStore {
            config: self.config.clone(),
            records: Vec::new(),
        };
        let mut losses = Vec::new();
        let n = self.config.batch_size;
        let d = pool.cols();
        for epoch in 1..=self.config.epochs {
            let idx = self.epoch_indices(pool.rows());
            for batch in 0..self.config.batches_per_epoch() {
                let mut data = Vec::with_capacity(n * d);
                for &i in &idx[batch * n..(batch + 1) * n] {
                    data.extend_from_slice(pool.row(i));
                }
                let real = Matrix::from_vec(n, d, data);
                losses.push(self.train_batch(&real, epoch, batch, monitor)?);
            }
            monitor.on_epoch(epoch, &self.model)?;
            if epoch.is_multiple_of(self.config.checkpoint_cadence) {
                let record = CheckpointRecord {
                    epoch,
                    model: self.model.clone(),
                };
                monitor.on_checkpoint(&record)?;
                store.push(record);
            }
        }
        Ok(TrainOutcome {
            store,
            losses,
            model: self.model,
        })
    }
}

fn diverged(e: Error, objective: &'static str, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFiniteObjective(_) | Error::NonFiniteGradient { .. } | Error::NonFiniteParameterGradient(_) => {
            Error::Diverged { objective, epoch, batch }
        }
        other => other,
    }
}

/// Process approximation from an F-only dataset.
pub fn train_process(dataset: &SnapshotSet, config: &TrainConfig, monitor: &mut dyn Monitor) -> Result<TrainOutcome> {
    if !dataset.problem.mode.is_process() {
        return Err(Error::Config("process training needs a process dataset".into()));
    }
    let task = Task::Process {
        coords: dataset.layout.coords_f.clone(),
    };
    Trainer::new(task, config.clone())?.run(&dataset.matrix(), monitor)
}

/// Solve the stochastic elliptic problem from snapshots matching `problem`.
pub fn train_sde(dataset: &SnapshotSet, problem: &ProblemSpec, config: &TrainConfig, monitor: &mut dyn Monitor) -> Result<TrainOutcome> {
    if dataset.layout != problem.layout {
        return Err(Error::Config("dataset layout differs from the problem layout".into()));
    }
    let task = Task::Sde(problem.clone());
    Trainer::new(task, config.clone())?.run(&dataset.matrix(), monitor)
}

/// Checkpoints averaged by the evaluation protocol.
pub const PROTOCOL_CHECKPOINTS: usize = 30;

/// Evaluation window for a run of `epochs`: the last 30 % of training, which
/// is the last 3000 epochs of a 10000-epoch run.
pub fn protocol_window(epochs: usize) -> usize {
    epochs * 3 / 10
}

/// Checkpoints chosen for evaluation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub epochs: Vec<usize>,
    /// Fewer checkpoints than requested were available.
    pub short: bool,
}

/// `count` checkpoints spread uniformly over the last `window` epochs,
/// ending at the newest one; each target takes the nearest saved epoch.
pub fn checkpoint_select(saved: &[usize], count: usize, window: usize) -> Selection {
    let Some(&last) = saved.iter().max() else {
        return Selection {
            epochs: Vec::new(),
            short: count > 0,
        };
    };
    if saved.len() <= count {
        let mut epochs = saved.to_vec();
        epochs.sort_unstable();
        return Selection {
            short: saved.len() < count,
            epochs,
        };
    }
    let start = last.saturating_sub(window);
    let mut epochs: Vec<usize> = (1..=count)
        .map(|i| {
            let target = start as f64 + window as f64 * i as f64 / count as f64;
            *saved
                .iter()
                .min_by(|&&a, &&b| (a as f64 - target).abs().total_cmp(&(b as f64 - target).abs()).then(a.cmp(&b)))
                .expect("nonempty")
        })
        .collect();
    epochs.dedup();
    Selection {
        short: epochs.len() < count,
        epochs,
    }
}

pub fn checkpoint_file_name(epoch: usize) -> String {
    format!("ckpt-{epoch:06}.bin")
}

pub fn config_hash(config_text: &str) -> String {
    Sha256::digest(config_text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Writes checkpoints, the loss log and the manifest as training proceeds.
pub struct CheckpointDir {
    dir: PathBuf,
    header: String,
    seed: u64,
    epochs: Vec<usize>,
    losses: std::io::BufWriter<std::fs::File>,
}

impl CheckpointDir {
    /// `run_description` is recorded verbatim in the manifest and hashed.
    pub fn create(dir: &Path, run_description: &str, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut losses = std::io::BufWriter::new(std::fs::File::create(dir.join("losses.csv"))?);
        std::io::Write::write_all(&mut losses, b"epoch,batch,encoder_objective,generator_objective\n")?;
        let header = format!(
            "format: gea-run-1\nconfig_sha256: {}\nseed: {seed}\nversion: {}\n[config]\n{}[end config]\n",
            config_hash(run_description),
            env!("CARGO_PKG_VERSION"),
            run_description
        );
        let me = Self {
            dir: dir.to_path_buf(),
            header,
            seed,
            epochs: Vec::new(),
            losses,
        };
        me.write_manifest()?;
        Ok(me)
    }

    fn write_manifest(&self) -> Result<()> {
        let epochs = self.epochs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(",");
        std::fs::write(self.dir.join("manifest.txt"), format!("{}epochs: {epochs}\n", self.header))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        std::io::Write::flush(&mut self.losses)?;
        self.write_manifest()
    }
}

impl Monitor for CheckpointDir {
    fn on_batch(&mut self, r: &LossRecord) {
        // IO failure here surfaces at the next checkpoint or at finish.
        let _ = writeln!(
            IoFmt(&mut self.losses),
            "{},{},{:?},{:?}",
            r.epoch, r.batch, r.encoder, r.generator
        );
    }

    fn on_checkpoint(&mut self, record: &CheckpointRecord) -> Result<()> {
        let ck = record.model.to_checkpoint(record.epoch as u64, self.seed);
        write_checkpoint(&self.dir.join(checkpoint_file_name(record.epoch)), &ck)?;
        self.epochs.push(record.epoch);
        std::io::Write::flush(&mut self.losses)?;
        self.write_manifest()
    }
}

struct IoFmt<'a, W: std::io::Write>(&'a mut W);

impl<W: std::io::Write> std::fmt::Write for IoFmt<'_, W> {
    fn write_str(&mut self, s: &str) -> std::fmt::Result {
        self.0.write_all(s.as_bytes()).map_err(|_| std::fmt::Error)
    }
}

/// Manifest fields read back from a run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub config_sha256: String,
    pub seed: u64,
    pub config_text: String,
    pub epochs: Vec<usize>,
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let bad = |m: &str| Error::Parse(format!("{}: {m}", dir.join("manifest.txt").display()));
    let mut sha = None;
    let mut seed = None;
    let mut epochs = None;
    let mut config = String::new();
    let mut in_config = false;
    for line in text.lines() {
        if line == "[config]" {
            in_config = true;
        } else if line == "[end config]" {
            in_config = false;
        } else if in_config {
            config.push_str(line);
            config.push('\n');
        } else if let Some(v) = line.strip_prefix("config_sha256: ") {
            sha = Some(v.to_string());
        } else if let Some(v) = line.strip_prefix("seed: ") {
            seed = Some(v.parse().map_err(|_| bad("bad seed"))?);
        } else if let Some(v) = line.strip_prefix("epochs:") {
            let v = v.trim();
            epochs = Some(if v.is_empty() {
                Vec::new()
            } else {
                v.split(',').map(|e| e.parse().map_err(|_| bad("bad epoch"))).collect::<Result<_>>()?
            });
        }
    }
    Ok(RunManifest {
        config_sha256: sha.ok_or_else(|| bad("missing config_sha256"))?,
        seed: seed.ok_or_else(|| bad("missing seed"))?,
        config_text: config,
        epochs: epochs.ok_or_else(|| bad("missing epochs"))?,
    })
}

pub fn load_checkpoint_model(dir: &Path, epoch: usize) -> Result<Model> {
    Model::from_checkpoint(&read_checkpoint(&dir.join(checkpoint_file_name(epoch)))?)
}

pub fn read_losses(path: &Path) -> Result<Vec<LossRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Parse(format!("losses line {}", i + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        out.push(LossRecord {
            epoch: f[0].parse().map_err(|_| bad())?,
            batch: f[1].parse().map_err(|_| bad())?,
            encoder: f[2].parse().map_err(|_| bad())?,
            generator: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochgen::{build_dataset, DataProblem, GaussKernelSpec, ProblemMode, SensorLayout};

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = OptimizerState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 1e-3, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_adam_step_is_sign_scaled() {
        let mut p = vec![0.0, 0.0];
        let mut s = OptimizerState::new(2);
        adam_step(&mut p, &[3.0, -0.5], &mut s, 1e-3, 0.9, 0.999, 1e-8).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-10);
        assert!((p[1] - 1e-3).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_names_index() {
        let mut p = vec![0.0; 3];
        let mut s = OptimizerState::new(3);
        let err = adam_step(&mut p, &[0.0, f64::NAN, 1.0], &mut s, 1e-3, 0.9, 0.999, 1e-8).unwrap_err();
        assert!(matches!(err, Error::NonFiniteParameterGradient(1)));
        assert_eq!(s.t, 0);
    }

    #[test]
    fn selection_examples() {
        let saved: Vec<usize> = (1..=100).map(|i| i * 100).collect();
        let sel = checkpoint_select(&saved, 30, 3000);
        assert_eq!(sel.epochs, (71..=100).map(|i| i * 100).collect::<Vec<_>>());
        assert!(!sel.short);
        let saved: Vec<usize> = (1..=50).map(|i| i * 100).collect();
        assert_eq!(checkpoint_select(&saved, 30, 3000).epochs, (21..=50).map(|i| i * 100).collect::<Vec<_>>());
        let sel = checkpoint_select(&[10, 20, 30, 40, 50], 30, 3000);
        assert_eq!(sel.epochs, vec![10, 20, 30, 40, 50]);
        assert!(sel.short);
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            snapshots: 8,
            learning_rate: 1e-3,
            noise_dim: 2,
            seed: 5,
            checkpoint_cadence: 1,
            generator: NetShape::new(1, 6),
            encoder: NetShape::new(1, 6),
            ..TrainConfig::default()
        }
    }

    fn process_set() -> SnapshotSet {
        let layout = SensorLayout::uniform(0, 0, 6, 0).unwrap();
        build_dataset(&DataProblem::process(GaussKernelSpec::new(0.0, 1.0, 2.0)), &layout, 8, 3).unwrap()
    }

    #[derive(Default)]
    struct Log(Vec<(usize, usize, StepKind)>);

    impl Monitor for Log {
        fn on_step(&mut self, epoch: usize, batch: usize, kind: StepKind) {
            self.0.push((epoch, batch, kind));
        }
    }

    #[test]
    fn process_smoke_run() {
        let mut log = Log::default();
        let out = train_process(&process_set(), &tiny_config(), &mut log).unwrap();
        assert_eq!(out.losses.len(), 2);
        assert!(out.losses.iter().all(|r| r.encoder.is_finite() && r.generator.is_finite()));
        assert_eq!(out.store.epochs(), vec![1, 2]);
        assert_eq!(
            log.0,
            vec![
                (1, 0, StepKind::Encoder),
                (1, 0, StepKind::Generator),
                (2, 0, StepKind::Encoder),
                (2, 0, StepKind::Generator)
            ]
        );
    }

    #[test]
    fn process_run_is_deterministic() {
        let a = train_process(&process_set(), &tiny_config(), &mut ()).unwrap();
        let b = train_process(&process_set(), &tiny_config(), &mut ()).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn steps_touch_only_their_own_networks() {
        let set = process_set();
        let task = Task::Process {
            coords: set.layout.coords_f.clone(),
        };
        let mut t = Trainer::new(task, tiny_config()).unwrap();
        let real = set.matrix();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xi = standard_normal(&mut rng, 8, 2);
        let prior = standard_normal(&mut rng, 8, 2);
        let generated = t.task().generate(t.model(), &xi).unwrap();
        let before = t.model().clone();
        t.encoder_step(&real, &generated, &prior).unwrap();
        assert_eq!(t.model().generators, before.generators);
        assert_ne!(t.model().encoder, before.encoder);
        let mid = t.model().clone();
        t.generator_step(&real, &xi, &prior).unwrap();
        assert_eq!(t.model().encoder, mid.encoder);
        assert_ne!(t.model().generators, mid.generators);
    }

    #[test]
    fn forward_smoke_run_and_encoder_width() {
        let layout = SensorLayout::uniform(13, 0, 21, 2).unwrap();
        let set = build_dataset(&DataProblem::elliptic(ProblemMode::Forward, 1.0 / 25.0), &layout, 8, 1).unwrap();
        let problem = ProblemSpec {
            mode: ProblemMode::Forward,
            layout,
            noise_dim: 2,
        };
        let out = train_sde(&set, &problem, &tiny_config(), &mut ()).unwrap();
        assert_eq!(out.model.encoder.config().input_dim, 36);
        assert_eq!(out.model.generators.len(), 2);
        assert!(out.losses.iter().all(|r| r.encoder.is_finite() && r.generator.is_finite()));
        assert_eq!(out.store.records.len(), 2);
    }

    #[test]
    fn checkpoint_dir_round_trip() {
        let dir = std::env::temp_dir().join(format!("gea-run-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let config = tiny_config();
        let mut sink = CheckpointDir::create(&dir, &config.describe(), config.seed).unwrap();
        let out = train_process(&process_set(), &config, &mut sink).unwrap();
        sink.finish().unwrap();
        let manifest = read_manifest(&dir).unwrap();
        assert_eq!(manifest.epochs, vec![1, 2]);
        assert_eq!(manifest.config_text, config.describe());
        assert_eq!(manifest.config_sha256, config_hash(&config.describe()));
        assert_eq!(load_checkpoint_model(&dir, 2).unwrap(), out.model);
        assert_eq!(read_losses(&dir.join("losses.csv")).unwrap(), out.losses);
        std::fs::remove_dir_all(&dir).ok();
    }


    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn selection_is_an_increasing_subset(
                saved in proptest::collection::btree_set(1usize..5000, 1..200),
                count in 1usize..40,
                window in 0usize..5000,
            ) {
                let saved: Vec<usize> = saved.into_iter().collect();
                let sel = checkpoint_select(&saved, count, window);
                prop_assert!(!sel.epochs.is_empty() && sel.epochs.len() <= count);
                prop_assert!(sel.epochs.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(sel.epochs.iter().all(|e| saved.contains(e)));
                prop_assert_eq!(sel.epochs.last(), saved.last());
                prop_assert_eq!(sel.short, sel.epochs.len() < count);
            }

            #[test]
            fn adam_moves_against_the_gradient(g in -10.0f64..10.0) {
                prop_assume!(g.abs() > 1e-6);
                let mut p = vec![0.0];
                let mut s = OptimizerState::new(1);
                adam_step(&mut p, &[g], &mut s, 1e-3, 0.9, 0.999, 1e-8).unwrap();
                prop_assert!(p[0] * g < 0.0);
                prop_assert!(p[0].abs() <= 1e-3 * (1.0 + 1e-6));
            }
        }
    }
}
