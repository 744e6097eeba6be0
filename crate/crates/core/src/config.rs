//! Named experiment presets and the key/value run-configuration format.
//!
//! A configuration file is a list of `key = value` (or `key: value`) lines;
//! `#` starts a comment. An optional `preset = name` line picks the base
//! settings, every other key overrides them, and anything left unset falls
//! back to [`TrainConfig::default`]. The output of [`RunConfig::describe`]
//! is itself a valid configuration file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::objectives::{BandwidthMode, MmdGranularity};
use crate::physics::ProblemSpec;
use crate::stochgen::{DataProblem, GaussKernelSpec, ProblemMode, SensorLayout};
use crate::trainer::{NetShape, OptimizerKind, ResampleMode, TrainConfig};

/// Number of sensors on each measured block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SensorCounts {
    pub k: usize,
    pub u: usize,
    pub f: usize,
    pub b: usize,
}

impl SensorCounts {
    pub const fn new(k: usize, u: usize, f: usize, b: usize) -> Self {
        Self { k, u, f, b }
    }

    pub fn layout(&self) -> Result<SensorLayout> {
        SensorLayout::uniform(self.k, self.u, self.f, self.b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPreset {
    pub name: &'static str,
    pub summary: &'static str,
    pub mode: ProblemMode,
    pub k_hat: Option<GaussKernelSpec>,
    pub forcing: GaussKernelSpec,
    pub sensors: SensorCounts,
    pub snapshots: usize,
    pub batch_size: usize,
    pub noise_dim: usize,
    pub epochs: usize,
    pub generator: NetShape,
    pub encoder: NetShape,
}

impl ExperimentPreset {
    pub fn problem(&self) -> DataProblem {
        let mut p = match self.mode {
            ProblemMode::Process => DataProblem::process(self.forcing),
            mode => DataProblem::elliptic(mode, self.forcing.width),
        };
        p.k_hat = self.k_hat;
        p.forcing = self.forcing;
        p
    }
}

const COEFFICIENT: GaussKernelSpec = GaussKernelSpec {
    mean: 0.0,
    variance: 4.0 / 25.0,
    width: 1.0,
};

const fn forcing(width: f64) -> GaussKernelSpec {
    GaussKernelSpec {
        mean: 0.5,
        variance: 9.0 / 400.0,
        width,
    }
}

/// Unit-variance process with correlation length `l`.
const fn process_kernel(l: f64) -> GaussKernelSpec {
    GaussKernelSpec {
        mean: 0.0,
        variance: 1.0,
        width: 2.0 * l * l,
    }
}

const WIDE: NetShape = NetShape {
    hidden_layers: 4,
    hidden_width: 128,
};
const NARROW: NetShape = NetShape {
    hidden_layers: 3,
    hidden_width: 64,
};

const fn process(name: &'static str, summary: &'static str, l: f64) -> ExperimentPreset {
    ExperimentPreset {
        name,
        summary,
        mode: ProblemMode::Process,
        k_hat: None,
        forcing: process_kernel(l),
        sensors: SensorCounts::new(0, 0, 6, 0),
        snapshots: 1000,
        batch_size: 500,
        noise_dim: 4,
        epochs: 5000,
        generator: NARROW,
        encoder: NARROW,
    }
}

#[allow(clippy::too_many_arguments)]
const fn elliptic(
    name: &'static str,
    summary: &'static str,
    mode: ProblemMode,
    forcing_width: f64,
    sensors: SensorCounts,
    snapshots: usize,
    batch_size: usize,
    noise_dim: usize,
) -> ExperimentPreset {
    ExperimentPreset {
        name,
        summary,
        mode,
        k_hat: Some(COEFFICIENT),
        forcing: forcing(forcing_width),
        sensors,
        snapshots,
        batch_size,
        noise_dim,
        epochs: 10_000,
        generator: WIDE,
        encoder: WIDE,
    }
}

const FORWARD: SensorCounts = SensorCounts::new(13, 0, 21, 2);
const INVERSE: SensorCounts = SensorCounts::new(1, 13, 21, 0);
const FORWARD_FORCING: f64 = 1.0 / 25.0;

/// Every built-in preset. `forward` is `pigea-2` under its common name.
pub const PRESETS: &[ExperimentPreset] = &[
    process("sp-l1", "Gaussian process, correlation length 1", 1.0),
    process("sp-l05", "Gaussian process, correlation length 0.5", 0.5),
    process("sp-l02", "Gaussian process, correlation length 0.2", 0.2),
    elliptic("pigea-1", "forward problem, N=1000 n=500 m=2", ProblemMode::Forward, FORWARD_FORCING, FORWARD, 1000, 500, 2),
    elliptic("pigea-2", "forward problem, N=1000 n=500 m=4", ProblemMode::Forward, FORWARD_FORCING, FORWARD, 1000, 500, 4),
    elliptic("pigea-3", "forward problem, N=1000 n=500 m=20", ProblemMode::Forward, FORWARD_FORCING, FORWARD, 1000, 500, 20),
    elliptic("pigea-4", "forward problem, N=300 n=300 m=4", ProblemMode::Forward, FORWARD_FORCING, FORWARD, 300, 300, 4),
    elliptic("pigea-5", "forward problem, N=2000 n=1000 m=4", ProblemMode::Forward, FORWARD_FORCING, FORWARD, 2000, 1000, 4),
    elliptic("pigea-6", "forward problem, N=5000 n=1000 m=4", ProblemMode::Forward, FORWARD_FORCING, FORWARD, 5000, 1000, 4),
    elliptic("forward", "forward problem (same as pigea-2)", ProblemMode::Forward, FORWARD_FORCING, FORWARD, 1000, 500, 4),
    elliptic("highdim-a008", "high-dimensional forcing, a=0.08", ProblemMode::HighDim, 0.08 * 0.08, FORWARD, 5000, 1000, 10),
    elliptic(
        "highdim-a002",
        "high-dimensional forcing, a=0.02",
        ProblemMode::HighDim,
        0.02 * 0.02,
        SensorCounts::new(13, 0, 41, 2),
        5000,
        1000,
        20,
    ),
    elliptic("inverse", "inverse problem, N=1000", ProblemMode::Inverse, FORWARD_FORCING, INVERSE, 1000, 500, 4),
    elliptic("inverse-2000", "inverse problem, N=2000", ProblemMode::Inverse, FORWARD_FORCING, INVERSE, 2000, 500, 4),
    elliptic("mixed-a", "mixed problem, 15 k / 9 u sensors", ProblemMode::Mixed, FORWARD_FORCING, SensorCounts::new(15, 9, 21, 0), 1000, 500, 4),
    elliptic("mixed-b", "mixed problem, 9 k / 15 u sensors", ProblemMode::Mixed, FORWARD_FORCING, SensorCounts::new(9, 15, 21, 0), 1000, 500, 4),
    elliptic(
        "mixed-a-2000",
        "mixed problem, 15 k / 9 u sensors, N=2000",
        ProblemMode::Mixed,
        FORWARD_FORCING,
        SensorCounts::new(15, 9, 21, 0),
        2000,
        500,
        4,
    ),
    elliptic(
        "mixed-b-2000",
        "mixed problem, 9 k / 15 u sensors, N=2000",
        ProblemMode::Mixed,
        FORWARD_FORCING,
        SensorCounts::new(9, 15, 21, 0),
        2000,
        500,
        4,
    ),
];

/// Family name resolved to `highdim-a008` or `highdim-a002` by noise dimension.
pub const HIGHDIM_FAMILY: &str = "highdim";

/// Looks up a preset; `noise_dim` only matters for the high-dimensional family.
pub fn find_preset(name: &str, noise_dim: Option<usize>) -> Result<&'static ExperimentPreset> {
    let name = if name == HIGHDIM_FAMILY {
        match noise_dim {
            None | Some(10) => "highdim-a008",
            Some(20) => "highdim-a002",
            Some(m) => {
                return Err(Error::Config(format!(
                    "preset {HIGHDIM_FAMILY} is defined for noise_dim 10 or 20, got {m}"
                )))
            }
        }
    } else {
        name
    };
    PRESETS
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))
}

/// Everything needed to generate data for and train one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub problem: DataProblem,
    pub sensors: SensorCounts,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_preset(p: &ExperimentPreset) -> Self {
        let train = TrainConfig {
            epochs: p.epochs,
            batch_size: p.batch_size,
            snapshots: p.snapshots,
            noise_dim: p.noise_dim,
            generator: p.generator,
            encoder: p.encoder,
            ..TrainConfig::default()
        };
        Self {
            preset: Some(p.name.to_string()),
            problem: p.problem(),
            sensors: p.sensors,
            train,
        }
    }

    pub fn layout(&self) -> Result<SensorLayout> {
        self.sensors.layout()
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        let spec = ProblemSpec {
            mode: self.problem.mode,
            layout: self.layout()?,
            noise_dim: self.train.noise_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.problem.forcing.validate()?;
        if let Some(k) = &self.problem.k_hat {
            k.validate()?;
        }
        if self.problem.mode.is_process() != self.problem.k_hat.is_none() {
            return Err(Error::Config("a coefficient kernel is required exactly for elliptic modes".into()));
        }
        let layout = self.layout()?;
        if self.problem.mode.is_process() {
            let s = self.sensors;
            if s.k + s.u + s.b > 0 || s.f == 0 {
                return Err(Error::Config(format!(
                    "process runs measure only f, got k={} u={} f={} b={}",
                    s.k, s.u, s.f, s.b
                )));
            }
            layout.validate()
        } else {
            self.problem_spec().map(|_| ())
        }
    }

    /// Resolved configuration as `key = value` lines that parse back to `self`.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        if let Some(p) = &self.preset {
            let _ = writeln!(s, "preset = {p}");
        }
        let _ = writeln!(s, "mode = {}", self.problem.mode);
        match &self.problem.k_hat {
            Some(k) => {
                let _ = writeln!(s, "k_hat = {k}");
            }
            None => {
                let _ = writeln!(s, "k_hat = none");
            }
        }
        let _ = writeln!(s, "forcing = {}", self.problem.forcing);
        let _ = writeln!(s, "grid_nodes = {}", self.problem.grid.nodes());
        let c = self.sensors;
        let _ = writeln!(s, "sensors_k = {}\nsensors_u = {}\nsensors_f = {}\nsensors_b = {}", c.k, c.u, c.f, c.b);
        s.push_str(&self.train.describe());
        s
    }
}

/// Reads and resolves a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Parses `key = value` lines into a resolved configuration.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_with(text, &[])
}

/// Like [`parse_config`], with `overrides` applied after the file's own keys.
pub fn parse_config_with(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut pairs = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let split = line
            .find(['=', ':'])
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (line[..split].trim(), line[split + 1..].trim());
        if pairs.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: key `{k}` given twice", n + 1)));
        }
    }
    for (k, v) in overrides {
        pairs.insert(k.clone(), v.clone());
    }
    resolve(pairs)
}

fn resolve(mut pairs: BTreeMap<String, String>) -> Result<RunConfig> {
    let noise_dim = pairs.get("noise_dim").map(|v| parse_num::<usize>("noise_dim", v)).transpose()?;
    let mut cfg = match pairs.remove("preset") {
        Some(name) => RunConfig::from_preset(find_preset(&name, noise_dim)?),
        None => RunConfig {
            preset: None,
            problem: DataProblem::elliptic(ProblemMode::Forward, FORWARD_FORCING),
            sensors: FORWARD,
            train: TrainConfig::default(),
        },
    };
    for (k, v) in &pairs {
        apply(&mut cfg, k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|x| parse_num(key, x.trim())).collect()
}

fn apply(cfg: &mut RunConfig, key: &str, v: &str) -> Result<()> {
    let t = &mut cfg.train;
    let bad = || Error::Config(format!("`{key}`: invalid value `{v}`"));
    match key {
        "mode" => {
            let mode: ProblemMode = v.parse().map_err(|_| bad())?;
            if mode.is_process() != cfg.problem.mode.is_process() {
                cfg.problem = match mode {
                    ProblemMode::Process => DataProblem::process(cfg.problem.forcing),
                    m => DataProblem::elliptic(m, FORWARD_FORCING),
                };
            }
            cfg.problem.mode = mode;
        }
        "k_hat" => cfg.problem.k_hat = if v == "none" { None } else { Some(v.parse().map_err(|_| bad())?) },
        "forcing" => cfg.problem.forcing = v.parse().map_err(|_| bad())?,
        "grid_nodes" => cfg.problem.grid = crate::stochgen::FineGrid::new(parse_num(key, v)?)?,
        "sensors_k" => cfg.sensors.k = parse_num(key, v)?,
        "sensors_u" => cfg.sensors.u = parse_num(key, v)?,
        "sensors_f" => cfg.sensors.f = parse_num(key, v)?,
        "sensors_b" => cfg.sensors.b = parse_num(key, v)?,
        "epochs" => t.epochs = parse_num(key, v)?,
        "batch_size" => t.batch_size = parse_num(key, v)?,
        "snapshots" => t.snapshots = parse_num(key, v)?,
        "learning_rate" => t.learning_rate = parse_num(key, v)?,
        "noise_dim" => t.noise_dim = parse_num(key, v)?,
        "beta1" => t.beta1 = parse_num(key, v)?,
        "beta2" => t.beta2 = parse_num(key, v)?,
        "epsilon" => t.epsilon = parse_num(key, v)?,
        "seed" => t.seed = parse_num(key, v)?,
        "checkpoint_cadence" => t.checkpoint_cadence = parse_num(key, v)?,
        "mmd_bandwidth" => {
            t.mmd.mode = if v == "median" {
                BandwidthMode::Median
            } else {
                BandwidthMode::Fixed(parse_list(key, v)?)
            }
        }
        "mmd_multipliers" => t.mmd.multipliers = parse_list(key, v)?,
        "mmd_floor" => t.mmd.floor = parse_num(key, v)?,
        "mmd_granularity" => {
            t.granularity = match v {
                "batch" => MmdGranularity::Batch,
                "per-sample" => MmdGranularity::PerSample,
                _ => return Err(bad()),
            }
        }
        "resample" => {
            t.resample = match v {
                "pool" => ResampleMode::Pool,
                "replacement" => ResampleMode::Replacement,
                _ => return Err(bad()),
            }
        }
        "optimizer" => {
            t.optimizer = match v {
                "adam" => OptimizerKind::Adam,
                "plain-sgd" => OptimizerKind::PlainSgd,
                _ => return Err(bad()),
            }
        }
        "fresh_noise" => t.fresh_noise = parse_num(key, v)?,
        "gen_hidden_layers" => t.generator.hidden_layers = parse_num(key, v)?,
        "gen_hidden_width" => t.generator.hidden_width = parse_num(key, v)?,
        "enc_hidden_layers" => t.encoder.hidden_layers = parse_num(key, v)?,
        "enc_hidden_width" => t.encoder.hidden_width = parse_num(key, v)?,
        _ => return Err(Error::Config(format!("unknown key `{key}`"))),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.sensors, FORWARD);
    }

    #[test]
    fn forward_preset_with_no_overrides() {
        let c = parse_config("preset = forward\n").unwrap();
        let d = TrainConfig::default();
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!((c.train.batch_size, c.train.noise_dim), (500, 4));
        assert_eq!(c.train.generator, NetShape::new(4, 128));
        assert_eq!(c.train.epochs, d.epochs);
        assert_eq!(c.sensors, SensorCounts::new(13, 0, 21, 2));
        assert_eq!(c.problem.mode, ProblemMode::Forward);
    }

    #[test]
    fn highdim_family_follows_noise_dim() {
        let c = parse_config("preset = highdim\nnoise_dim = 20").unwrap();
        assert_eq!(c.preset.as_deref(), Some("highdim-a002"));
        assert_eq!(c.sensors.f, 41);
        assert!((c.problem.forcing.width - 0.0004).abs() < 1e-15);
        let c = parse_config("preset = highdim").unwrap();
        assert_eq!(c.preset.as_deref(), Some("highdim-a008"));
        assert!(parse_config("preset = highdim\nnoise_dim = 7").is_err());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config("preset = forward\nlerning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("lerning_rate"), "{err}");
    }

    #[test]
    fn contradictory_sensor_counts_rejected() {
        assert!(parse_config("preset = forward\nsensors_u = 4").is_err());
        assert!(parse_config("preset = inverse\nsensors_k = 3").is_err());
        assert!(parse_config("preset = forward\nsensors_b = 1").is_err());
        assert!(parse_config("preset = sp-l1\nsensors_k = 2").is_err());
    }

    #[test]
    fn duplicate_and_malformed_lines_rejected() {
        assert!(parse_config("epochs = 3\nepochs = 4").is_err());
        assert!(parse_config("epochs 3").is_err());
        assert!(parse_config("epochs = three").is_err());
    }

    #[test]
    fn colon_separator_and_comments() {
        let c = parse_config("# note\npreset: sp-l05   # inline\nepochs: 12\n").unwrap();
        assert_eq!(c.train.epochs, 12);
        assert_eq!(c.problem.forcing.width, 0.5);
    }

    #[test]
    fn describe_round_trips_every_preset() {
        for p in PRESETS {
            let c = RunConfig::from_preset(p);
            assert_eq!(parse_config(&c.describe()).unwrap(), c, "{}", p.name);
        }
        let mut c = parse_config("preset = mixed-b\nseed = 9\nmmd_bandwidth = 0.5,2\nfresh_noise = true").unwrap();
        c.train.learning_rate = 3.0e-5;
        assert_eq!(parse_config(&c.describe()).unwrap(), c);
    }

    #[test]
    fn preset_names_unique_and_valid() {
        for (i, p) in PRESETS.iter().enumerate() {
            assert!(PRESETS[i + 1..].iter().all(|q| q.name != p.name));
            RunConfig::from_preset(p).validate().unwrap();
        }
    }


    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn describe_parses_back(
                preset in 0..PRESETS.len(),
                epochs in 1usize..100_000,
                lr in 1e-6f64..1e-1,
                seed in any::<u64>(),
                cadence in 1usize..500,
            ) {
                let mut c = RunConfig::from_preset(&PRESETS[preset]);
                c.train.epochs = epochs;
                c.train.learning_rate = lr;
                c.train.seed = seed;
                c.train.checkpoint_cadence = cadence;
                prop_assert_eq!(parse_config(&c.describe()).unwrap(), c);
            }
        }
    }
}
