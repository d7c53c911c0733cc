//! End-to-end runs of the command-line interface on a coarse diamond
//! experiment: full pipeline, reproducibility, and error exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use netwave_cli::run_from;

const CONFIG: &str = r#"
[network]
nodes = ["v1", "j1", "j2", "j3", "j4", "v2"]
edges = [
  { id = "e1", tail = "v1", head = "j1", length = 1.0 },
  { id = "e2", tail = "j1", head = "j2", length = 1.0 },
  { id = "e3", tail = "j1", head = "j3", length = 1.0 },
  { id = "e4", tail = "j2", head = "j3", length = 1.0 },
  { id = "e5", tail = "j2", head = "j4", length = 1.0 },
  { id = "e6", tail = "j3", head = "j4", length = 1.0 },
  { id = "e7", tail = "j4", head = "v2", length = 1.0 },
]

[coefficients]
a = [4.0, 4.0, 1.0, 1.0, 1.0, 4.0, 4.0]
b = [0.25, 0.25, 1.0, 1.0, 1.0, 0.25, 0.25]
d_base = [0.5, 0.5, 4.0, 4.0, 4.0, 0.5, 0.5]

[parameter]
min = 0.01
max = 10.0
train_count = 4

[discretization]
cells_per_edge = 3

[solver]
tau = 0.05
t_final = 1.0

[boundary]
v1 = "1 - cos(t)"

[greedy]
tolerance = 1e-7
max_basis = 25

[test]
count = 4
seed = 11

[plotdata]
mu = 2.3

[output]
dir = "out"
"#;

fn setup(cfg: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    fs::write(&path, cfg).unwrap();
    (dir, path)
}

fn run(args: &[&str]) -> i32 {
    run_from(args.iter().copied())
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn full_pipeline_produces_all_reports() {
    let (dir, cfg) = setup(CONFIG);
    let cfg_s = cfg.to_str().unwrap();
    let out = dir.path().join("out");

    assert_eq!(run(&["netwave", "truth", "--config", cfg_s, "--mu", "1"]), 0);
    let truth = read(&out.join("truth_mu1.csv"));
    assert!(truth.starts_with("t,norm_p_sq,norm_u_sq,energy\n"));
    assert_eq!(truth.lines().count(), 22); // header + 21 records
    let energy = read(&out.join("truth_energy_mu1.csv"));
    assert!(energy.starts_with("t,energy\n"));

    assert_eq!(run(&["netwave", "train", "--config", cfg_s]), 0);
    assert!(out.join("basis.json").exists());
    let history = read(&out.join("greedy_history.csv"));
    assert!(history.starts_with("iter,mu,indicator,dimQ,dimV,N\n"));
    assert!(history.lines().count() >= 2);
    assert!(read(&out.join("train_meta.txt")).contains("stop: "));

    assert_eq!(run(&["netwave", "test", "--config", cfg_s]), 0);
    let nsweep = read(&out.join("nsweep.csv"));
    assert!(nsweep.starts_with("N,max_err_sq,max_delta,max_delta_tilde,max_eta,max_eta_tilde\n"));
    let stages = nsweep.lines().count() - 1;
    assert!(stages >= 2, "expected several basis sizes, got {stages}");
    let sample = read(&out.join("test_sample.csv"));
    assert_eq!(sample.lines().count(), 5); // header + 4 parameters
    assert!(out.join("timeseries_mu000_N0003.csv").exists());
    let meta = read(&out.join("test_meta.txt"));
    assert!(meta.contains("rigor_violations: 0"), "{meta}");
    assert!(meta.contains("tightness_ratio: "), "{meta}");
    // Bounds shrink as the basis grows: the largest N beats kernel-only.
    let first = nsweep.lines().nth(1).unwrap();
    let last = nsweep.lines().last().unwrap();
    let delta_of = |line: &str| -> f64 { line.split(',').nth(2).unwrap().parse().unwrap() };
    assert!(delta_of(last) < delta_of(first));

    assert_eq!(run(&["netwave", "plotdata", "--config", cfg_s, "--svg"]), 0);
    for name in ["fig2.csv", "fig3.csv", "fig4.csv", "fig2.svg", "fig3.svg", "fig4.svg"] {
        assert!(out.join(name).exists(), "missing {name}");
    }
    let fig3 = read(&out.join("fig3.csv"));
    assert!(fig3.starts_with("N,max_err_sq,max_delta,max_delta_tilde\n"));
    assert_eq!(fig3.lines().count() - 1, stages);
    assert!(read(&out.join("fig2.csv")).starts_with("t,err_sq,delta,delta_tilde\n"));
    assert!(read(&out.join("fig4.csv")).starts_with("N,max_eta,max_eta_tilde\n"));

    assert_eq!(run(&["netwave", "constants", "--config", cfg_s]), 0);
    let consts = read(&out.join("constants.csv"));
    assert!(consts.starts_with("mu,c0,c1,c_p,gamma,c_prime,c_dprime,c_tilde\n"));
    assert_eq!(consts.lines().count(), 5); // header + 4 training parameters
    assert_eq!(
        run(&["netwave", "constants", "--config", cfg_s, "--mu", "1.0"]),
        0
    );
    assert_eq!(read(&out.join("constants.csv")).lines().count(), 2);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let (dir_a, cfg_a) = setup(CONFIG);
    let (dir_b, cfg_b) = setup(CONFIG);
    for cfg in [&cfg_a, &cfg_b] {
        let cfg = cfg.to_str().unwrap();
        assert_eq!(run(&["netwave", "train", "--config", cfg]), 0);
        assert_eq!(run(&["netwave", "test", "--config", cfg]), 0);
    }
    let out_a = dir_a.path().join("out");
    let out_b = dir_b.path().join("out");
    let mut compared = 0;
    for name in [
        "basis.json",
        "greedy_history.csv",
        "nsweep.csv",
        "test_sample.csv",
        "timeseries_mu000_N0003.csv",
    ] {
        assert_eq!(
            fs::read(out_a.join(name)).unwrap(),
            fs::read(out_b.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
        compared += 1;
    }
    // Every per-parameter series must match, not just the sampled one.
    for entry in fs::read_dir(&out_a).unwrap() {
        let name = entry.unwrap().file_name();
        let s = name.to_string_lossy().into_owned();
        if s.starts_with("timeseries_") || s.starts_with("musweep_") {
            assert_eq!(
                fs::read(out_a.join(&s)).unwrap(),
                fs::read(out_b.join(&s)).unwrap(),
                "{s} differs"
            );
            compared += 1;
        }
    }
    assert!(compared > 8);

    // Re-running test in place (warm truth cache) also reproduces the files.
    let before = fs::read(out_a.join("nsweep.csv")).unwrap();
    assert_eq!(run(&["netwave", "test", "--config", cfg_a.to_str().unwrap()]), 0);
    assert_eq!(fs::read(out_a.join("nsweep.csv")).unwrap(), before);
}

#[test]
fn failure_exit_codes() {
    let (dir, cfg) = setup(CONFIG);
    let cfg_s = cfg.to_str().unwrap();

    // Missing basis: test before train.
    assert_eq!(run(&["netwave", "test", "--config", cfg_s]), 1);
    // Parameter outside the admissible range.
    assert_eq!(run(&["netwave", "truth", "--config", cfg_s, "--mu", "100"]), 1);
    assert_eq!(
        run(&["netwave", "constants", "--config", cfg_s, "--mu", "0.001"]),
        1
    );
    // Plot data before any test reports exist.
    assert_eq!(run(&["netwave", "plotdata", "--config", cfg_s]), 1);

    // A basis trained for a different discretization is rejected.
    assert_eq!(run(&["netwave", "train", "--config", cfg_s]), 0);
    let basis = dir.path().join("out").join("basis.json");
    let (_dir2, cfg2) = setup(&CONFIG.replace("cells_per_edge = 3", "cells_per_edge = 4"));
    assert_eq!(
        run(&[
            "netwave",
            "test",
            "--config",
            cfg2.to_str().unwrap(),
            "--basis",
            basis.to_str().unwrap(),
        ]),
        1
    );

    // Corrupted reports are a usage error, not a crash.
    fs::write(dir.path().join("out").join("nsweep.csv"), "garbage\n1,2\n").unwrap();
    assert_eq!(run(&["netwave", "plotdata", "--config", cfg_s]), 1);
}

#[test]
fn seed_flag_overrides_config_sample() {
    let (dir, cfg) = setup(CONFIG);
    let cfg_s = cfg.to_str().unwrap();
    assert_eq!(run(&["netwave", "train", "--config", cfg_s]), 0);
    assert_eq!(run(&["netwave", "test", "--config", cfg_s]), 0);
    let out = dir.path().join("out");
    let sample_default = read(&out.join("test_sample.csv"));
    assert_eq!(run(&["netwave", "test", "--config", cfg_s, "--seed", "99"]), 0);
    let sample_override = read(&out.join("test_sample.csv"));
    assert_ne!(sample_default, sample_override);
    assert!(read(&out.join("test_meta.txt")).contains("seed: 99"));
    // Restoring the seed restores the sample bytes.
    assert_eq!(run(&["netwave", "test", "--config", cfg_s, "--seed", "11"]), 0);
    assert_eq!(read(&out.join("test_sample.csv")), sample_default);
}
