//! The predict/update recursion over a simulated scenario and its output
//! files.
//!
//! `run.csv` has one row per step with the fixed column order
//! `step, log_evidence, intensity_<label>.., card_0..card_<n_max>`; row 0
//! is the prior, with log-evidence 0. `summary.json` repeats every row with
//! the measurement set, the true objects, the MAP and expected cardinality
//! and the truncation bound, and stores the final posterior density.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use pgfl_core::bayes::posterior_partition_clutter;
use pgfl_core::finite_pp::DensityDoc;
use pgfl_core::prediction::predict_with_tol;
use pgfl_core::{Error, MeasurementSet, MultiObjectDensity};
use serde::{Deserialize, Serialize};

use crate::config::Scenario;
use crate::simulate::{rng_for, simulate, Simulation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub measurements: Vec<String>,
    pub truth: Vec<String>,
    pub log_evidence: f64,
    pub intensity: Vec<f64>,
    pub cardinality: Vec<f64>,
    pub map_cardinality: usize,
    pub expected_cardinality: f64,
    pub truncation_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub state_labels: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub final_posterior: DensityDoc,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("step {step}: measurement set {measurements:?} has zero likelihood under the model")]
    ZeroEvidence { step: usize, measurements: Vec<String> },
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::ZeroEvidence { .. } => 2,
            RunError::Other(_) => 1,
        }
    }
}

fn labels(space: &pgfl_core::FiniteSpace, points: &[usize]) -> Vec<String> {
    points.iter().map(|&i| space.label(i).to_owned()).collect()
}

fn record(step: usize, density: &MultiObjectDensity<f64>, intensity: Vec<f64>, log_evidence: f64, bound: f64) -> StepRecord {
    let cardinality = density.cardinality_distribution();
    let map_cardinality = cardinality
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (n, &p)| if p > best.1 { (n, p) } else { best })
        .0;
    StepRecord {
        step,
        measurements: Vec::new(),
        truth: Vec::new(),
        log_evidence,
        intensity,
        cardinality,
        map_cardinality,
        expected_cardinality: density.expected_cardinality(),
        truncation_bound: bound,
    }
}

/// Runs the filter over given measurement sets; `sim.measurements[0]` is
/// ignored. The prior is renormalized over `0..=n_max` first.
pub fn run_filter(scenario: &Scenario, sim: &Simulation) -> Result<RunRecord, RunError> {
    let clutter = scenario.filter_clutter()?;
    let opts = scenario.update_options();
    let (mut density, _) = scenario.prior.normalized().context("prior has zero mass")?;
    let sx = &scenario.state_space;
    let sz = &scenario.obs_space;

    let mut first = record(0, &density, density.intensity(), 0.0, density.truncation_mass());
    first.truth = labels(sx, &sim.truth[0]);
    let mut steps = vec![first];
    for k in 1..sim.measurements.len() {
        let predicted = predict_with_tol(&density, &scenario.transition, scenario.config.tolerances.predict)
            .with_context(|| format!("step {k}: prediction"))?;
        let z = MeasurementSet::new(sim.measurements[k].clone());
        let post = match posterior_partition_clutter(&predicted, &scenario.kernel, &clutter, &z, opts) {
            Ok(p) => p,
            Err(Error::ZeroEvidence) => {
                return Err(RunError::ZeroEvidence { step: k, measurements: labels(sz, z.points()) })
            }
            Err(e) => return Err(anyhow::Error::new(e).context(format!("step {k}: update")).into()),
        };
        let mut row = record(k, &post.density, post.intensity, post.log_evidence, post.truncation_bound);
        row.measurements = labels(sz, &sim.measurements[k]);
        row.truth = labels(sx, &sim.truth[k]);
        steps.push(row);
        density = post.density;
    }
    Ok(RunRecord {
        seed: scenario.config.seed,
        state_labels: sx.labels().to_vec(),
        steps,
        final_posterior: density.to_doc(),
    })
}

/// Simulates `config.steps` steps from `config.seed` and filters them.
pub fn run(scenario: &Scenario) -> Result<RunRecord, RunError> {
    let sim = simulate(scenario, scenario.config.steps, &mut rng_for(scenario.config.seed));
    run_filter(scenario, &sim)
}

pub fn csv(record: &RunRecord) -> String {
    let mut out = String::from("step,log_evidence");
    for l in &record.state_labels {
        write!(out, ",intensity_{l}").unwrap();
    }
    let n_card = record.steps.first().map_or(0, |r| r.cardinality.len());
    for n in 0..n_card {
        write!(out, ",card_{n}").unwrap();
    }
    out.push('\n');
    for r in &record.steps {
        write!(out, "{},{}", r.step, r.log_evidence).unwrap();
        for v in r.intensity.iter().chain(&r.cardinality) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Writes `run.csv` and `summary.json` and returns their paths.
pub fn write_outputs(record: &RunRecord, out_dir: &Path) -> anyhow::Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let csv_path = out_dir.join("run.csv");
    let json_path = out_dir.join("summary.json");
    std::fs::write(&csv_path, csv(record)).with_context(|| format!("writing {}", csv_path.display()))?;
    let mut json = serde_json::to_string_pretty(record)?;
    json.push('\n');
    std::fs::write(&json_path, json).with_context(|| format!("writing {}", json_path.display()))?;
    Ok((csv_path, json_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScenarioConfig;

    fn scenario(steps: usize) -> Scenario {
        let mut cfg = ScenarioConfig::from_json(
            r#"{
              "version": 1,
              "state_labels": ["west", "east"],
              "obs_labels": ["w", "e"],
              "n_max": 5,
              "m_max": 1,
              "prior": {"type": "poisson", "intensity": [0.3, 0.2]},
              "kernel": {"type": "bernoulli_detection", "detection": [0.9, 0.8], "likelihood": [[0.9, 0.1], [0.2, 0.8]]},
              "clutter": {"type": "poisson", "intensity": [0.1, 0.1], "n_max": 8},
              "transition": {"survival": [0.9, 0.9], "motion": [[0.8, 0.2], [0.2, 0.8]],
                             "birth": {"type": "poisson", "intensity": [0.01, 0.01]}},
              "seed": 11,
              "tolerances": {"tail": 1e-4, "predict": 1e-2, "posterior_truncation": 1.0}
            }"#,
        )
        .unwrap();
        cfg.steps = steps;
        cfg.build().unwrap()
    }

    #[test]
    fn rows_are_normalized_and_csv_is_shaped() {
        let rec = run(&scenario(20)).unwrap();
        assert_eq!(rec.steps.len(), 21);
        for r in &rec.steps {
            assert!((r.cardinality.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let text = csv(&rec);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 22);
        assert_eq!(lines[0], "step,log_evidence,intensity_west,intensity_east,card_0,card_1,card_2,card_3,card_4,card_5");
        assert!(lines[1].starts_with("0,0,"));
        assert!(lines.iter().all(|l| l.split(',').count() == 10));
    }

    #[test]
    fn zero_evidence_names_the_step() {
        let sc = scenario(2);
        let sim = Simulation { truth: vec![vec![]; 3], measurements: vec![vec![], vec![0, 0], vec![0; 14]] };
        match run_filter(&sc, &sim) {
            Err(e @ RunError::ZeroEvidence { .. }) => {
                assert_eq!(e.exit_code(), 2);
                assert!(matches!(e, RunError::ZeroEvidence { step: 2, .. }));
            }
            other => panic!("expected zero evidence, got {other:?}"),
        }
    }
}
