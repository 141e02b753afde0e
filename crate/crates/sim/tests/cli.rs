use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pgfl_core::MultiObjectDensity;
use pgfl_sim::config::{ClutterSpec, KernelSpec, ScenarioConfig};
use pgfl_sim::run::{run, RunRecord};
use pgfl_sim::simulate::{rng_for, simulate};
use serde_json::Value;
use tempfile::TempDir;

fn base() -> ScenarioConfig {
    ScenarioConfig::from_json(
        r#"{
          "version": 1,
          "state_labels": ["north", "south", "east"],
          "obs_labels": ["n", "s"],
          "n_max": 6,
          "m_max": 1,
          "prior": {"type": "poisson", "intensity": [0.4, 0.2, 0.3]},
          "kernel": {"type": "bernoulli_detection", "detection": [0.9, 0.6, 0.8],
                     "likelihood": [[0.85, 0.15], [0.2, 0.8], [0.5, 0.5]]},
          "clutter": {"type": "poisson", "intensity": [0.15, 0.1]},
          "transition": {"survival": [0.9, 0.85, 0.9],
                         "motion": [[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.2, 0.2, 0.6]],
                         "birth": {"type": "poisson", "intensity": [0.02, 0.02, 0.01]}},
          "steps": 15,
          "seed": 2024,
          "tolerances": {"tail": 1e-4, "predict": 1e-2, "posterior_truncation": 1.0}
        }"#,
    )
    .unwrap()
}

fn write_config(dir: &Path, name: &str, cfg: &ScenarioConfig) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn pgfl(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pgfl"));
    cmd.args(args);
    if let Some(t) = threads {
        cmd.env("PGFL_THREADS", t);
    }
    cmd.output().expect("binary runs")
}

fn run_cli(dir: &Path, cfg: &ScenarioConfig, tag: &str, extra: &[&str], threads: Option<&str>) -> (Vec<u8>, Vec<u8>, Output) {
    let config = write_config(dir, &format!("{tag}.json"), cfg);
    let out_dir = dir.join(tag);
    let mut args = vec!["run", "--config", config.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = pgfl(&args, threads);
    let csv = std::fs::read(out_dir.join("run.csv")).unwrap_or_default();
    let json = std::fs::read(out_dir.join("summary.json")).unwrap_or_default();
    (csv, json, out)
}

fn parse_csv(bytes: &[u8]) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = String::from_utf8(bytes.to_vec()).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_owned).collect();
    let rows = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    (header, rows)
}

#[test]
fn outputs_are_byte_identical_for_a_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = base();
    let (c1, j1, o1) = run_cli(dir.path(), &cfg, "a", &[], None);
    let (c2, j2, _) = run_cli(dir.path(), &cfg, "b", &[], Some("1"));
    let (c3, j3, _) = run_cli(dir.path(), &cfg, "c", &[], Some("3"));
    assert!(o1.status.success(), "{}", String::from_utf8_lossy(&o1.stderr));
    assert!(!c1.is_empty() && !j1.is_empty());
    assert_eq!(c1, c2);
    assert_eq!(c1, c3);
    assert_eq!(j1, j2);
    assert_eq!(j1, j3);
    let (c4, _, _) = run_cli(dir.path(), &cfg, "d", &["--seed", "7"], None);
    assert_ne!(c1, c4);
}

#[test]
fn csv_layout_and_normalization() {
    let dir = TempDir::new().unwrap();
    let (csv, json, out) = run_cli(dir.path(), &base(), "run", &[], None);
    assert!(out.status.success());
    let (header, rows) = parse_csv(&csv);
    let expect: Vec<String> = ["step", "log_evidence", "intensity_north", "intensity_south", "intensity_east"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..=6).map(|n| format!("card_{n}")))
        .collect();
    assert_eq!(header, expect);
    assert_eq!(rows.len(), 16);
    for (k, row) in rows.iter().enumerate() {
        assert_eq!(row[0], k as f64);
        let total: f64 = row[5..].iter().sum();
        assert!((total - 1.0).abs() < 1e-9, "row {k} sums to {total}");
    }
    assert_eq!(rows[0][1], 0.0);

    let summary: RunRecord = serde_json::from_slice(&json).unwrap();
    assert_eq!(summary.steps.len(), 16);
    for (r, row) in summary.steps.iter().zip(&rows) {
        assert_eq!(r.intensity, row[2..5]);
        assert_eq!(r.log_evidence, row[1]);
        let map = r.cardinality.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(r.map_cardinality, map);
    }
    let last = MultiObjectDensity::<f64>::from_doc(&summary.final_posterior).unwrap();
    for (a, b) in last.intensity().iter().zip(&summary.steps[15].intensity) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn log_domain_flag_agrees_with_linear() {
    let dir = TempDir::new().unwrap();
    let (lin, _, _) = run_cli(dir.path(), &base(), "lin", &[], None);
    let (log, _, out) = run_cli(dir.path(), &base(), "log", &["--log-domain"], None);
    assert!(out.status.success());
    let (_, a) = parse_csv(&lin);
    let (_, b) = parse_csv(&log);
    for (ra, rb) in a.iter().zip(&b) {
        for (x, y) in ra.iter().zip(rb) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn zero_steps_writes_only_the_prior() {
    let dir = TempDir::new().unwrap();
    let mut cfg = base();
    cfg.steps = 0;
    let (csv, _, out) = run_cli(dir.path(), &cfg, "zero", &[], None);
    assert!(out.status.success());
    let (_, rows) = parse_csv(&csv);
    assert_eq!(rows.len(), 1);
    let sc = cfg.build().unwrap();
    let prior = sc.prior.normalized().unwrap().0;
    assert_eq!(rows[0][2..5], prior.intensity()[..]);
    assert_eq!(rows[0][5..], prior.cardinality_distribution()[..]);
}

#[test]
fn missing_clutter_equals_explicit_empty_clutter() {
    let dir = TempDir::new().unwrap();
    let mut none = base();
    none.clutter = ClutterSpec::None;
    let mut empty = base();
    empty.clutter = ClutterSpec::Explicit { tensors: vec![vec![1.0]] };
    let (c1, j1, o1) = run_cli(dir.path(), &none, "none", &[], None);
    let (c2, j2, _) = run_cli(dir.path(), &empty, "empty", &[], None);
    assert!(o1.status.success(), "{}", String::from_utf8_lossy(&o1.stderr));
    assert_eq!(c1, c2);
    assert_eq!(j1, j2);
}

#[test]
fn clutter_only_scenario_keeps_zero_intensity() {
    let mut cfg = base();
    cfg.prior = pgfl_sim::config::PriorSpec::Poisson { intensity: vec![0.0; 3] };
    cfg.transition.birth = pgfl_sim::config::BirthSpec::None;
    cfg.steps = 25;
    let rec = run(&cfg.build().unwrap()).unwrap();
    assert!(rec.steps.iter().skip(1).any(|r| !r.measurements.is_empty()));
    for r in &rec.steps {
        assert!(r.intensity.iter().all(|&v| v == 0.0), "step {}: {:?}", r.step, r.intensity);
        assert!((r.cardinality[0] - 1.0).abs() < 1e-15);
    }
}

fn undetectable(cfg: &mut ScenarioConfig) {
    cfg.m_max = 0;
    cfg.kernel = KernelSpec::Explicit { tables: vec![vec![vec![1.0]]; 3] };
}

#[test]
fn undetectable_objects_leave_only_clutter() {
    let mut cfg = base();
    undetectable(&mut cfg);
    cfg.clutter = ClutterSpec::None;
    let sc = cfg.build().unwrap();
    let sim = simulate(&sc, 300, &mut rng_for(5));
    assert!(sim.truth.iter().any(|t| !t.is_empty()));
    assert!(sim.measurements.iter().all(Vec::is_empty));

    let mut cfg = base();
    undetectable(&mut cfg);
    let sc = cfg.build().unwrap();
    let sim = simulate(&sc, 300, &mut rng_for(5));
    let n: usize = sim.measurements.iter().map(Vec::len).sum();
    let mean = n as f64 / 300.0;
    let expect = sc.clutter.as_ref().unwrap().density().expected_cardinality();
    assert!((mean - expect).abs() < 0.1, "{mean} vs {expect}");
}

#[test]
fn mean_measurement_count_matches_model() {
    let mut cfg = base();
    cfg.transition.survival = vec![0.0; 3];
    cfg.transition.birth = pgfl_sim::config::BirthSpec::Poisson { intensity: vec![0.5, 0.3, 0.4] };
    cfg.kernel = KernelSpec::Explicit {
        tables: vec![
            vec![vec![0.2], vec![0.3, 0.2], vec![0.2, 0.1, 0.1, 0.2]],
            vec![vec![0.6], vec![0.1, 0.2], vec![0.1, 0.04, 0.04, 0.02]],
            vec![vec![0.1], vec![0.25, 0.25], vec![0.2, 0.2, 0.2, 0.2]],
        ],
    };
    cfg.m_max = 2;
    cfg.tolerances.predict = 1.0;
    let sc = cfg.build().unwrap();
    let steps = 10_000;
    let sim = simulate(&sc, steps, &mut rng_for(99));
    let counts: Vec<f64> = sim.measurements[1..].iter().map(|z| z.len() as f64).collect();
    let mean = counts.iter().sum::<f64>() / steps as f64;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (steps - 1) as f64;
    let se = (var / steps as f64).sqrt();

    let birth = sc.motion.birth.intensity();
    let per_object: f64 = (0..3).map(|x| birth[x] * sc.kernel.expected_measurements(x)).sum();
    let expect = per_object + sc.clutter.as_ref().unwrap().density().expected_cardinality();
    assert!((mean - expect).abs() < 3.0 * se, "mean {mean} expected {expect} se {se}");
}

#[test]
fn phd_step_matches_offline_formula() {
    let mut cfg = ScenarioConfig::from_json(
        r#"{
          "version": 1,
          "state_labels": ["left", "right"],
          "obs_labels": ["l", "r", "c"],
          "n_max": 10,
          "m_max": 1,
          "prior": {"type": "poisson", "intensity": [0.2, 0.1]},
          "kernel": {"type": "bernoulli_detection", "detection": [0.9, 0.7],
                     "likelihood": [[0.7, 0.1, 0.2], [0.15, 0.6, 0.25]]},
          "clutter": {"type": "poisson", "intensity": [0.2, 0.1, 0.3]},
          "transition": {"survival": [0.95, 0.8], "motion": [[0.75, 0.25], [0.4, 0.6]],
                         "birth": {"type": "poisson", "intensity": [0.05, 0.1]}},
          "steps": 1,
          "tolerances": {"tail": 1e-9}
        }"#,
    )
    .unwrap();
    let p_s = [0.95, 0.8];
    let f = [[0.75, 0.25], [0.4, 0.6]];
    let b = [0.05, 0.1];
    let p_d = [0.9, 0.7];
    let g = [[0.7, 0.1, 0.2], [0.15, 0.6, 0.25]];
    let kappa = [0.2, 0.1, 0.3];
    let dir = TempDir::new().unwrap();
    let mut seen_measurements = 0;
    for seed in 0..12u64 {
        cfg.seed = seed;
        let (csv, json, out) = run_cli(dir.path(), &cfg, &format!("phd{seed}"), &[], None);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let (_, rows) = parse_csv(&csv);
        let summary: Value = serde_json::from_slice(&json).unwrap();
        let z: Vec<usize> = summary["steps"][1]["measurements"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| ["l", "r", "c"].iter().position(|l| v == l).unwrap())
            .collect();
        seen_measurements += z.len();

        let mu0 = &rows[0][2..4];
        let mu1: Vec<f64> = (0..2).map(|x| b[x] + (0..2).map(|y| p_s[y] * f[y][x] * mu0[y]).sum::<f64>()).collect();
        for x in 0..2 {
            let mut phd = (1.0 - p_d[x]) * mu1[x];
            for &zj in &z {
                let den = kappa[zj] + (0..2).map(|y| p_d[y] * g[y][zj] * mu1[y]).sum::<f64>();
                phd += p_d[x] * g[x][zj] * mu1[x] / den;
            }
            let got = rows[1][2 + x];
            assert!((got - phd).abs() < 1e-9, "seed {seed} x {x}: {got} vs {phd}");
        }
    }
    assert!(seen_measurements > 0);
}

#[test]
fn impossible_measurements_exit_with_code_two() {
    let dir = TempDir::new().unwrap();
    let mut cfg = base();
    cfg.n_max = 1;
    cfg.clutter = ClutterSpec::None;
    cfg.kernel = KernelSpec::BernoulliDetection {
        detection: vec![1.0; 3],
        likelihood: vec![vec![0.5, 0.5]; 3],
    };
    cfg.transition.birth = pgfl_sim::config::BirthSpec::Poisson { intensity: vec![1.0; 3] };
    cfg.tolerances = pgfl_sim::config::Tolerances { tail: 1.0, predict: 1.0, posterior_truncation: 1.0 };
    cfg.steps = 50;
    let (_, _, out) = run_cli(dir.path(), &cfg, "bad", &[], None);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("step ") && err.contains("zero likelihood"), "{err}");

    let config = write_config(dir.path(), "bad_update.json", &cfg);
    let out = pgfl(&["update", "--config", config.to_str().unwrap(), "--measurements", "n,s,n"], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn update_prints_a_normalized_posterior() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "u.json", &base());
    let out = pgfl(&["update", "--config", config.to_str().unwrap(), "--measurements", "n,s"], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let post = MultiObjectDensity::<f64>::from_json(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert!((post.total_mass() - 1.0).abs() < 1e-10);
    assert_eq!(post.space().labels(), ["north", "south", "east"]);

    let out = pgfl(&["update", "--config", config.to_str().unwrap(), "--measurements", ""], None);
    assert!(out.status.success());
    let out = pgfl(&["update", "--config", config.to_str().unwrap(), "--measurements", "n,west"], None);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_config_exits_with_code_one() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("broken.json");
    std::fs::write(&path, r#"{"version": 1}"#).unwrap();
    let out = pgfl(&["run", "--config", path.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("run.csv").exists());
}

#[test]
fn partitions_subcommand_counts() {
    let out = pgfl(&["partitions", "--m", "4"], None);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 16);
    assert!(text.contains("{0,1,2,3}\n"));
    assert!(text.ends_with("# 15 partitions\n"));
    let out = pgfl(&["partitions", "--m", "4", "--max-block", "2"], None);
    assert!(String::from_utf8(out.stdout).unwrap().ends_with("# 10 partitions\n"));
}

#[test]
fn verify_rejects_unknown_level() {
    let out = pgfl(&["verify", "--level", "medium"], None);
    assert!(!out.status.success());
}

#[test]
fn shipped_scenario_runs() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/two_zones.json");
    let cfg = ScenarioConfig::load(&path).unwrap();
    let rec = run(&cfg.build().unwrap()).unwrap();
    assert_eq!(rec.steps.len(), cfg.steps + 1);
}
