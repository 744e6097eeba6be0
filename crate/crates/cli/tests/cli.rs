use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gea_core::config::{parse_config, PRESETS};
use gea_core::stochgen::read_dataset;
use gea_core::trainer::read_manifest;

fn gea(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gea"))
        .args(args)
        .env_remove("GEA_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gea(args);
    assert!(
        out.status.success(),
        "gea {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("gea-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_NETS: [&str; 8] = [
    "--set",
    "gen_hidden_width=8",
    "--set",
    "enc_hidden_width=8",
    "--set",
    "gen_hidden_layers=1",
    "--set",
    "enc_hidden_layers=1",
];

#[test]
fn presets_lists_every_preset() {
    let out = ok(&["presets"]);
    for p in PRESETS {
        assert!(out.contains(p.name), "missing {}", p.name);
    }
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(gea(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(gea(&["train", "--jobs", "many"]).status.code(), Some(2));
    assert_eq!(gea(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_one_and_name_the_problem() {
    let out = gea(&["gen-data", "--preset", "no-such-preset", "--out", "/dev/null"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-preset"));

    let out = gea(&["gen-data", "--preset", "forward", "--set", "colour=blue"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));

    let dir = scratch("missing-run");
    let out = gea(&["eval", "--run-dir", s(&dir)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn forward_dataset_defaults_to_full_training_set() {
    let dir = scratch("forward-data");
    let path = dir.join("d.csv");
    ok(&["gen-data", "--preset", "forward", "--seed", "3", "--set", "grid_nodes=201", "--out", s(&path)]);
    let set = read_dataset(&path).unwrap();
    assert_eq!(set.len(), 1000);
    assert_eq!(set.layout.counts(), [13, 0, 21, 2]);
    assert_eq!(set.seed, 3);

    // Same seed, same bytes.
    let again = dir.join("e.csv");
    ok(&["gen-data", "--preset", "forward", "--seed", "3", "--set", "grid_nodes=201", "--out", s(&again)]);
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = scratch("config");
    let cfg = dir.join("run.conf");
    std::fs::write(&cfg, "# small inverse run\npreset = inverse\nsnapshots: 12\nbatch_size = 6\n").unwrap();
    let path = dir.join("d.csv");
    ok(&["gen-data", "--config", s(&cfg), "--set", "grid_nodes=101", "--out", s(&path)]);
    let set = read_dataset(&path).unwrap();
    assert_eq!(set.len(), 1000);
    assert_eq!(set.layout.counts(), [1, 13, 21, 0]);

    // A preset on the command line plus one in the file is a duplicate key.
    let out = gea(&["gen-data", "--config", s(&cfg), "--preset", "forward", "--out", s(&path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("preset"));
}

#[test]
fn process_run_end_to_end() {
    let dir = scratch("process");
    let data = dir.join("data.csv");
    let tiny = ["--set", "snapshots=40", "--set", "batch_size=20"];
    ok(&[&["gen-data", "--preset", "sp-l1", "--out", s(&data)][..], &tiny].concat());
    let run = dir.join("run");
    let args = [
        &["train", "--preset", "sp-l1", "--data", s(&data), "--run-dir", s(&run), "--epochs", "6", "--quiet"][..],
        &tiny,
        &["--set", "checkpoint_cadence=2", "--w1-samples", "50"],
        &TINY_NETS,
    ]
    .concat();
    ok(&args);

    let m = read_manifest(&run).unwrap();
    assert_eq!(m.epochs, vec![2, 4, 6]);
    assert!(m.config_text.contains("# dataset_sha256 = "));
    let cfg = parse_config(&m.config_text).unwrap();
    assert_eq!(cfg.train.epochs, 6);
    assert_eq!(cfg.train.generator.hidden_width, 8);
    let losses = std::fs::read_to_string(run.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 6 * 2);
    let w1 = std::fs::read_to_string(run.join("wasserstein.csv")).unwrap();
    assert_eq!(w1.lines().count(), 1 + 3);

    let eval = ok(&[
        "eval",
        "--run-dir",
        s(&run),
        "--window",
        "4",
        "--checkpoints",
        "2",
        "--test-points",
        "11",
        "--test-samples",
        "40",
        "--reference-samples",
        "40",
    ]);
    assert!(eval.contains("f: relative L2 error"), "{eval}");
    let errors = std::fs::read_to_string(run.join("eval/errors.csv")).unwrap();
    assert_eq!(errors.lines().count(), 1 + 2);
    let curves = std::fs::read_to_string(run.join("eval/curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 11);

    let listed = ok(&["report", "--run-dir", s(&run)]);
    for name in ["losses", "wasserstein", "errors", "summary", "moments-f", "eigenvalues-f"] {
        let p = run.join("plots").join(format!("{name}.svg"));
        assert!(listed.contains(s(&p)), "{name} not listed");
        let svg = std::fs::read_to_string(&p).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    // The same seed repeats the run exactly.
    let rerun = dir.join("rerun");
    let args: Vec<&str> = args.iter().map(|a| if *a == s(&run) { s(&rerun) } else { a }).collect();
    ok(&args);
    assert_eq!(losses, std::fs::read_to_string(rerun.join("losses.csv")).unwrap());
}

#[test]
fn elliptic_seeds_run_in_subdirectories() {
    let dir = scratch("forward");
    let args = [
        &[
            "--out-dir",
            s(&dir),
            "train",
            "--preset",
            "forward",
            "--epochs",
            "2",
            "--seeds",
            "1,2",
            "--jobs",
            "2",
            "--set",
            "grid_nodes=101",
            "--set",
            "snapshots=8",
            "--set",
            "batch_size=4",
            "--set",
            "checkpoint_cadence=1",
        ][..],
        &TINY_NETS,
    ]
    .concat();
    ok(&args);
    let run = dir.join("forward");
    assert!(run.join("dataset.csv").exists());
    for seed in [1u64, 2] {
        let m = read_manifest(&run.join(format!("seed-{seed}"))).unwrap();
        assert_eq!(m.seed, seed);
        assert_eq!(m.epochs, vec![1, 2]);
        assert_eq!(parse_config(&m.config_text).unwrap().train.seed, seed);
    }
    let a = std::fs::read_to_string(run.join("seed-1/losses.csv")).unwrap();
    let b = std::fs::read_to_string(run.join("seed-2/losses.csv")).unwrap();
    assert_ne!(a, b);

    let eval = ok(&[
        "eval",
        "--run-dir",
        s(&run.join("seed-1")),
        "--test-points",
        "9",
        "--test-samples",
        "20",
        "--reference-samples",
        "20",
    ]);
    assert!(eval.contains("k: ") && eval.contains("u: "), "{eval}");
    let eig = std::fs::read_to_string(run.join("seed-1/eval/eigenvalues.csv")).unwrap();
    assert!(eig.lines().skip(1).any(|l| l.starts_with("k,")));
    assert!(eig.lines().skip(1).any(|l| l.starts_with("u,")));
}

#[test]
fn dataset_must_match_the_configuration() {
    let dir = scratch("mismatch");
    let data = dir.join("p.csv");
    ok(&["gen-data", "--preset", "sp-l1", "--set", "snapshots=10", "--set", "batch_size=5", "--out", s(&data)]);
    let out = gea(&["train", "--preset", "forward", "--data", s(&data), "--run-dir", s(&dir.join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different problem"));
}
