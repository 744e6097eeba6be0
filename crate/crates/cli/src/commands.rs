use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};

use gea_core::config::{find_preset, parse_config, parse_config_with, RunConfig, PRESETS};
use gea_core::evalsuite::{evaluate_generator, Chain, EvalConfig, MetricsReport, WassersteinMonitor};
use gea_core::stochgen::{
    build_dataset, derive_seed, pool_size, read_dataset, sample_fields, sample_gp, write_dataset, SnapshotSet,
};
use gea_core::trainer::{
    checkpoint_select, load_checkpoint_model, protocol_window, read_manifest, train_process, train_sde, CheckpointDir,
    LossRecord, Model, Monitor,
};

use crate::{EvalArgs, GenDataArgs, RunSource, TrainArgs};

/// Seed tag for the reference paths behind the training-time Wasserstein curve.
const W1_REFERENCE_TAG: u64 = 500;
/// Seed tag for evaluation reference samples.
const EVAL_REFERENCE_TAG: u64 = 501;

pub(crate) fn resolve(source: &RunSource) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    for s in &source.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{s}`"))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut text = match &source.config {
        Some(path) => std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?,
        None => String::new(),
    };
    if let Some(p) = &source.preset {
        // A second `preset` line in the file is reported as a duplicate key.
        text.insert_str(0, &format!("preset = {p}\n"));
    }
    let cfg = parse_config_with(&text, &overrides).map_err(|e| match &source.config {
        Some(path) => anyhow!("{}: {e}", path.display()),
        None => anyhow!(e),
    })?;
    Ok(cfg)
}

pub(crate) fn gen_data(out_dir: &Path, args: GenDataArgs) -> Result<()> {
    let cfg = resolve(&args.source)?;
    let count = args.count.unwrap_or_else(|| pool_size(cfg.train.snapshots));
    let layout = cfg.layout()?;
    let set = build_dataset(&cfg.problem, &layout, count, args.seed)?;
    let out = args.out.unwrap_or_else(|| out_dir.join("dataset.csv"));
    ensure_parent(&out)?;
    write_dataset(&out, &set).with_context(|| format!("writing {}", out.display()))?;
    let [k, u, f, b] = layout.counts();
    println!(
        "wrote {} snapshots ({} mode, blocks k={k} u={u} f={f} b={b}) to {}",
        set.len(),
        cfg.problem.mode,
        out.display()
    );
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn train(out_dir: &Path, args: TrainArgs) -> Result<()> {
    let mut source = args.source.clone();
    if let Some(e) = args.epochs {
        source.set.push(format!("epochs={e}"));
    }
    let cfg = resolve(&source)?;
    let run_dir = args
        .run_dir
        .clone()
        .unwrap_or_else(|| out_dir.join(cfg.preset.as_deref().unwrap_or("run")));
    std::fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;

    let layout = cfg.layout()?;
    let (data, note) = match &args.data {
        Some(path) => {
            let bytes = std::fs::read(path).with_context(|| format!("reading dataset {}", path.display()))?;
            let set = read_dataset(path).with_context(|| format!("parsing dataset {}", path.display()))?;
            if set.problem != cfg.problem || set.layout != layout {
                bail!(
                    "dataset {} was generated for a different problem or sensor layout than the configuration",
                    path.display()
                );
            }
            let note = format!("# dataset = {}\n# dataset_sha256 = {}\n", path.display(), sha256_hex(&bytes));
            (set, note)
        }
        None => {
            let set = build_dataset(&cfg.problem, &layout, pool_size(cfg.train.snapshots), args.data_seed)?;
            let path = run_dir.join("dataset.csv");
            write_dataset(&path, &set)?;
            let note = format!(
                "# dataset = {} (sampled with data_seed = {}, count = {})\n# dataset_sha256 = {}\n",
                path.display(),
                args.data_seed,
                set.len(),
                sha256_hex(&std::fs::read(&path)?)
            );
            (set, note)
        }
    };

    let seeds = if args.seeds.is_empty() { vec![cfg.train.seed] } else { args.seeds.clone() };
    let dirs: Vec<PathBuf> = if seeds.len() == 1 {
        vec![run_dir.clone()]
    } else {
        seeds.iter().map(|s| run_dir.join(format!("seed-{s}"))).collect()
    };
    let jobs = args.jobs.max(1).min(seeds.len());
    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= seeds.len() {
                    break;
                }
                let opts = RunOptions {
                    seed: seeds[i],
                    dir: &dirs[i],
                    note: &note,
                    w1_samples: args.w1_samples,
                    quiet: args.quiet || jobs > 1,
                };
                if let Err(e) = train_one(&cfg, &data, &opts) {
                    failures.lock().expect("no panics while held").push(format!("seed {}: {e:#}", seeds[i]));
                }
            });
        }
    });
    let failures = failures.into_inner().expect("no panics while held");
    if !failures.is_empty() {
        bail!("{}", failures.join("\n"));
    }
    for d in &dirs {
        println!("run written to {}", d.display());
    }
    Ok(())
}

struct RunOptions<'a> {
    seed: u64,
    dir: &'a Path,
    note: &'a str,
    w1_samples: usize,
    quiet: bool,
}

/// Progress lines on stderr, about a hundred per run.
struct Progress {
    epochs: usize,
    every: usize,
    last: Option<LossRecord>,
    start: Instant,
    quiet: bool,
}

impl Monitor for Progress {
    fn on_batch(&mut self, record: &LossRecord) {
        self.last = Some(*record);
    }

    fn on_epoch(&mut self, epoch: usize, _model: &Model) -> gea_core::Result<()> {
        if !self.quiet && (epoch.is_multiple_of(self.every) || epoch == self.epochs) {
            if let Some(r) = &self.last {
                eprintln!(
                    "epoch {epoch}/{}  encoder {:.6}  generator {:.6}  ({:.1} s)",
                    self.epochs,
                    r.encoder,
                    r.generator,
                    self.start.elapsed().as_secs_f64()
                );
            }
        }
        Ok(())
    }
}

fn train_one(base: &RunConfig, data: &SnapshotSet, opts: &RunOptions) -> Result<()> {
    let mut cfg = base.clone();
    cfg.train.seed = opts.seed;
    let description = format!("{}{}", cfg.describe(), opts.note);
    let mut store = CheckpointDir::create(opts.dir, &description, opts.seed)?;
    let mut progress = Progress {
        epochs: cfg.train.epochs,
        every: (cfg.train.epochs / 100).max(1),
        last: None,
        start: Instant::now(),
        quiet: opts.quiet,
    };
    if cfg.problem.mode.is_process() {
        let coords = data.layout.coords_f.clone();
        let reference = sample_gp(&cfg.problem.forcing, &coords, opts.w1_samples, derive_seed(opts.seed, W1_REFERENCE_TAG))?;
        let mut w1 = WassersteinMonitor::new(coords, reference, opts.w1_samples, cfg.train.checkpoint_cadence, opts.seed)?;
        train_process(data, &cfg.train, &mut Chain(vec![&mut store, &mut progress, &mut w1]))?;
        let mut csv = csv::Writer::from_path(opts.dir.join("wasserstein.csv"))?;
        csv.write_record(["epoch", "wasserstein"])?;
        for (e, w) in &w1.curve {
            csv.write_record([e.to_string(), format!("{w:?}")])?;
        }
        csv.flush()?;
    } else {
        let spec = cfg.problem_spec()?;
        train_sde(data, &spec, &cfg.train, &mut Chain(vec![&mut store, &mut progress]))?;
    }
    store.finish()?;
    Ok(())
}

pub(crate) fn eval(args: EvalArgs) -> Result<()> {
    let manifest = read_manifest(&args.run_dir).with_context(|| format!("reading run {}", args.run_dir.display()))?;
    let cfg = parse_config(&manifest.config_text).context("manifest configuration")?;
    let window = args.window.unwrap_or_else(|| protocol_window(cfg.train.epochs));
    let selection = checkpoint_select(&manifest.epochs, args.checkpoints, window);
    if selection.epochs.is_empty() {
        bail!("run {} has no checkpoints", args.run_dir.display());
    }
    if selection.short {
        eprintln!(
            "warning: {} distinct checkpoints in the window, {} requested",
            selection.epochs.len(),
            args.checkpoints
        );
    }
    let models = selection
        .epochs
        .iter()
        .map(|&e| load_checkpoint_model(&args.run_dir, e).with_context(|| format!("loading checkpoint {e}")))
        .collect::<Result<Vec<_>>>()?;
    let eval = EvalConfig {
        test_points: args.test_points,
        test_samples: args.test_samples,
        reference_samples: args.reference_samples,
        checkpoints: args.checkpoints,
        window,
        seed: args.seed,
    };
    let reference = sample_fields(
        &cfg.problem,
        &eval.test_coords(),
        eval.reference_samples,
        derive_seed(args.seed, EVAL_REFERENCE_TAG),
    )?;
    let fields: &[char] = if cfg.problem.mode.is_process() { &['f'] } else { &['k', 'u'] };
    let pairs: Vec<(usize, &Model)> = selection.epochs.iter().copied().zip(&models).collect();
    let report = evaluate_generator(&pairs, fields, &eval, &reference)?;
    let out = args.out.unwrap_or_else(|| args.run_dir.join("eval"));
    std::fs::create_dir_all(&out)?;
    write_report(&out, &report)?;
    print!("{}", summary_text(&report));
    println!("report written to {}", out.display());
    Ok(())
}

fn write_report(dir: &Path, r: &MetricsReport) -> Result<()> {
    let mut errors = csv::Writer::from_path(dir.join("errors.csv"))?;
    errors.write_record(["epoch", "field", "rel_err_mean", "rel_err_std"])?;
    let mut summary = csv::Writer::from_path(dir.join("summary.csv"))?;
    summary.write_record([
        "field",
        "rel_err_mean",
        "rel_err_mean_sd",
        "rel_err_std",
        "rel_err_std_sd",
        "wasserstein",
    ])?;
    let mut curves = csv::Writer::from_path(dir.join("curves.csv"))?;
    curves.write_record(["x", "field", "mean", "std", "reference_mean", "reference_std"])?;
    let mut eig = csv::Writer::from_path(dir.join("eigenvalues.csv"))?;
    eig.write_record(["field", "index", "generated", "reference"])?;
    let f = |v: f64| format!("{v:?}");
    for fr in &r.fields {
        let name = fr.field.to_string();
        for (i, e) in r.epochs.iter().enumerate() {
            errors.write_record([e.to_string(), name.clone(), f(fr.rel_err_mean[i]), f(fr.rel_err_std[i])])?;
        }
        summary.write_record([
            name.clone(),
            f(fr.rel_err_mean_summary.mean),
            f(fr.rel_err_mean_summary.std),
            f(fr.rel_err_std_summary.mean),
            f(fr.rel_err_std_summary.std),
            f(fr.wasserstein),
        ])?;
        for (i, x) in r.test_coords.iter().enumerate() {
            curves.write_record([
                f(*x),
                name.clone(),
                f(fr.mean_curve[i]),
                f(fr.std_curve[i]),
                f(fr.reference_mean[i]),
                f(fr.reference_std[i]),
            ])?;
        }
        for (i, (g, rf)) in fr.eigenvalues_generated.iter().zip(&fr.eigenvalues_reference).enumerate() {
            eig.write_record([name.clone(), (i + 1).to_string(), f(*g), f(*rf)])?;
        }
    }
    errors.flush()?;
    summary.flush()?;
    curves.flush()?;
    eig.flush()?;
    Ok(())
}

fn summary_text(r: &MetricsReport) -> String {
    let mut s = format!(
        "{} checkpoints, epochs {}..{}\n",
        r.epochs.len(),
        r.epochs.first().copied().unwrap_or(0),
        r.epochs.last().copied().unwrap_or(0)
    );
    for fr in &r.fields {
        let _ = writeln!(
            s,
            "{}: relative L2 error of mean {:.4} ± {:.4}, of std {:.4} ± {:.4}; W1 {:.4}",
            fr.field,
            fr.rel_err_mean_summary.mean,
            fr.rel_err_mean_summary.std,
            fr.rel_err_std_summary.mean,
            fr.rel_err_std_summary.std,
            fr.wasserstein
        );
    }
    s
}

pub(crate) fn preset_table() -> String {
    let mut s = format!(
        "{:<14} {:<9} {:>3} {:>3} {:>3} {:>3} {:>5} {:>5} {:>3} {:>6} {:>6}  {}\n",
        "name", "mode", "k", "u", "f", "b", "N", "n", "m", "epochs", "nets", "description"
    );
    for p in PRESETS {
        let c = p.sensors;
        let _ = writeln!(
            s,
            "{:<14} {:<9} {:>3} {:>3} {:>3} {:>3} {:>5} {:>5} {:>3} {:>6} {:>6}  {}",
            p.name,
            p.mode.to_string(),
            c.k,
            c.u,
            c.f,
            c.b,
            p.snapshots,
            p.batch_size,
            p.noise_dim,
            p.epochs,
            format!("{}x{}", p.generator.hidden_layers, p.generator.hidden_width),
            p.summary
        );
    }
    let a = find_preset("highdim", Some(10)).map(|p| p.name).unwrap_or("?");
    let b = find_preset("highdim", Some(20)).map(|p| p.name).unwrap_or("?");
    let _ = writeln!(s, "\n`highdim` picks {a} (noise_dim 10, the default) or {b} (noise_dim 20).");
    s
}
