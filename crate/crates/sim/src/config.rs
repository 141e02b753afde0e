//! Scenario configuration: a versioned JSON document describing the state
//! and observation spaces, the prior, the measurement and clutter models,
//! the motion model and the run parameters.
//!
//! Vectors indexed by state or observation are given in label order;
//! `motion[y][x]` is the probability of moving from `y` to `x`. Kernel
//! tables are per state, one flattened row-major tensor per measurement
//! count.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use pgfl_core::bayes::UpdateOptions;
use pgfl_core::prediction::{build_multiplicative, DEFAULT_PREDICT_TOL};
use pgfl_core::{
    ClutterProcess, FiniteSpace, MultiObjectDensity, MultiplicativeSpec, ObservationKernel, PoissonSpec, TransitionModel,
};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    pub state_labels: Vec<String>,
    pub obs_labels: Vec<String>,
    pub n_max: usize,
    pub m_max: usize,
    pub prior: PriorSpec,
    pub kernel: KernelSpec,
    #[serde(default)]
    pub clutter: ClutterSpec,
    pub transition: TransitionSpec,
    #[serde(default)]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub log_domain: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    Poisson { intensity: Vec<f64> },
    Bernoulli { existence: f64, distribution: Vec<f64> },
    Explicit { tensors: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    BernoulliDetection { detection: Vec<f64>, likelihood: Vec<Vec<f64>> },
    /// `tables[x][m]` is the flattened tensor `r_{m|1}(· | x)`.
    Explicit { tables: Vec<Vec<Vec<f64>>> },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClutterSpec {
    #[default]
    None,
    /// Order chosen from `tolerances.tail` unless `n_max` is given.
    Poisson {
        intensity: Vec<f64>,
        #[serde(default)]
        n_max: Option<usize>,
    },
    Explicit { tensors: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionSpec {
    pub survival: Vec<f64>,
    pub motion: Vec<Vec<f64>>,
    #[serde(default)]
    pub birth: BirthSpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum BirthSpec {
    #[default]
    None,
    Poisson { intensity: Vec<f64> },
    Bernoulli { existence: f64, distribution: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Poisson tail mass neglected when an order is chosen automatically.
    pub tail: f64,
    /// Mass a prediction may push above `n_max`.
    pub predict: f64,
    /// Bound on posterior mass lost above `n_max` in an update.
    pub posterior_truncation: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { tail: 1e-12, predict: DEFAULT_PREDICT_TOL, posterior_truncation: UpdateOptions::default().truncation_tol }
    }
}

/// Validated, ready-to-use models built from a [`ScenarioConfig`].
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub state_space: Arc<FiniteSpace>,
    pub obs_space: Arc<FiniteSpace>,
    pub prior: MultiObjectDensity<f64>,
    pub kernel: ObservationKernel<f64>,
    pub clutter: Option<ClutterProcess<f64>>,
    pub motion: MultiplicativeSpec<f64>,
    pub transition: TransitionModel<f64>,
}

fn check_len(what: &str, v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        bail!("{what}: expected {d} values, found {}", v.len());
    }
    Ok(())
}

fn poisson(space: &Arc<FiniteSpace>, intensity: &[f64], n_max: Option<usize>, tail: f64) -> Result<MultiObjectDensity<f64>> {
    check_len("poisson intensity", intensity, space.dim())?;
    let spec = PoissonSpec { intensity: intensity.to_vec(), tail_tol: tail };
    Ok(MultiObjectDensity::poisson(space.clone(), &spec, n_max)?)
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).context("malformed scenario config")?;
        if cfg.version != CONFIG_VERSION {
            bail!("unsupported config version {} (expected {CONFIG_VERSION})", cfg.version);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Validates every component and builds the models.
    pub fn build(&self) -> Result<Scenario> {
        let sx = Arc::new(FiniteSpace::new(self.state_labels.iter().cloned()).context("state labels")?);
        let sz = Arc::new(FiniteSpace::new(self.obs_labels.iter().cloned()).context("observation labels")?);
        let (dx, dz) = (sx.dim(), sz.dim());
        let tail = self.tolerances.tail;

        let prior = match &self.prior {
            PriorSpec::Poisson { intensity } => poisson(&sx, intensity, Some(self.n_max), tail)?,
            PriorSpec::Bernoulli { existence, distribution } => {
                check_len("prior distribution", distribution, dx)?;
                let b = MultiObjectDensity::bernoulli(sx.clone(), *existence, distribution)?;
                let mut full = MultiObjectDensity::<f64>::zeros(sx.clone(), self.n_max)?.tensors().to_vec();
                for (dst, src) in full.iter_mut().zip(b.tensors()) {
                    dst.clone_from(src);
                }
                let lost = b.cardinality_distribution().iter().skip(self.n_max + 1).sum::<f64>();
                MultiObjectDensity::from_tensors(sx.clone(), full)?.with_truncation_mass(lost)
            }
            PriorSpec::Explicit { tensors } => {
                if tensors.len() != self.n_max + 1 {
                    bail!("explicit prior has {} tensors, expected n_max + 1 = {}", tensors.len(), self.n_max + 1);
                }
                MultiObjectDensity::from_tensors(sx.clone(), tensors.clone())?
            }
        };
        let tail_lost = prior.truncation_mass();
        if tail_lost > tail {
            bail!("prior loses mass {tail_lost:e} above n_max = {}, more than tolerances.tail = {tail:e}", self.n_max);
        }
        prior.validate_probability(1e-10).context("prior")?;

        let kernel = match &self.kernel {
            KernelSpec::BernoulliDetection { detection, likelihood } => {
                if self.m_max != 1 {
                    bail!("bernoulli_detection kernels have m_max = 1, config says {}", self.m_max);
                }
                ObservationKernel::bernoulli_detection(sx.clone(), sz.clone(), detection, likelihood)?
            }
            KernelSpec::Explicit { tables } => {
                if tables.len() != dx {
                    bail!("explicit kernel has {} state tables, expected {dx}", tables.len());
                }
                let dens = tables
                    .iter()
                    .enumerate()
                    .map(|(x, t)| {
                        if t.len() != self.m_max + 1 {
                            bail!("kernel table for {} has {} tensors, expected m_max + 1", sx.label(x), t.len());
                        }
                        Ok(MultiObjectDensity::from_tensors(sz.clone(), t.clone())?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                ObservationKernel::new(sx.clone(), dens)?
            }
        };

        let clutter = match &self.clutter {
            ClutterSpec::None => None,
            ClutterSpec::Poisson { intensity, n_max } => {
                check_len("clutter intensity", intensity, dz)?;
                let spec = PoissonSpec { intensity: intensity.clone(), tail_tol: tail };
                Some(ClutterProcess::poisson(sz.clone(), &spec, *n_max)?)
            }
            ClutterSpec::Explicit { tensors } => {
                Some(ClutterProcess::new(MultiObjectDensity::from_tensors(sz.clone(), tensors.clone())?)?)
            }
        };

        let t = &self.transition;
        check_len("survival", &t.survival, dx)?;
        let birth = match &t.birth {
            BirthSpec::None => MultiObjectDensity::unit(sx.clone(), 0)?,
            BirthSpec::Poisson { intensity } => poisson(&sx, intensity, Some(self.n_max), tail)?,
            BirthSpec::Bernoulli { existence, distribution } => {
                check_len("birth distribution", distribution, dx)?;
                MultiObjectDensity::bernoulli(sx.clone(), *existence, distribution)?
            }
        };
        let motion = MultiplicativeSpec { survival: t.survival.clone(), motion: t.motion.clone(), birth };
        let tables = build_multiplicative(&motion, self.n_max, self.tolerances.predict).context("transition")?;

        Ok(Scenario {
            config: self.clone(),
            state_space: sx,
            obs_space: sz,
            prior,
            kernel,
            clutter,
            motion,
            transition: TransitionModel::Explicit(tables),
        })
    }
}

impl Scenario {
    pub fn update_options(&self) -> UpdateOptions {
        UpdateOptions {
            log_domain: self.config.log_domain,
            prune: true,
            truncation_tol: self.config.tolerances.posterior_truncation,
        }
    }

    /// Clutter used by the filter; a missing clutter model is the empty
    /// process.
    pub fn filter_clutter(&self) -> Result<ClutterProcess<f64>> {
        match &self.clutter {
            Some(c) => Ok(c.clone()),
            None => Ok(ClutterProcess::empty(self.obs_space.clone())?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn example() -> ScenarioConfig {
        ScenarioConfig::from_json(
            r#"{
              "version": 1,
              "state_labels": ["west", "east"],
              "obs_labels": ["w", "e"],
              "n_max": 4,
              "m_max": 1,
              "prior": {"type": "poisson", "intensity": [0.3, 0.2]},
              "kernel": {"type": "bernoulli_detection", "detection": [0.9, 0.8], "likelihood": [[0.9, 0.1], [0.2, 0.8]]},
              "clutter": {"type": "poisson", "intensity": [0.1, 0.1]},
              "transition": {"survival": [0.9, 0.9], "motion": [[0.8, 0.2], [0.2, 0.8]],
                             "birth": {"type": "poisson", "intensity": [0.01, 0.01]}},
              "steps": 3,
              "seed": 7,
              "tolerances": {"tail": 1e-3, "predict": 1e-3, "posterior_truncation": 1.0}
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn builds_and_round_trips() {
        let cfg = example();
        let sc = cfg.build().unwrap();
        assert_eq!(sc.state_space.dim(), 2);
        assert!(sc.clutter.is_some());
        assert_eq!(ScenarioConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = example();
        cfg.version = 2;
        assert!(ScenarioConfig::from_json(&cfg.to_json()).is_err());
        let mut cfg = example();
        cfg.transition.motion[0] = vec![0.5, 0.6];
        assert!(cfg.build().is_err());
        let mut cfg = example();
        cfg.m_max = 2;
        assert!(cfg.build().is_err());
        let mut cfg = example();
        cfg.tolerances.tail = 1e-12;
        assert!(cfg.build().is_err(), "order 4 cannot hold the prior tail to 1e-12");
        assert!(ScenarioConfig::from_json(r#"{"version": 1, "bogus": true}"#).is_err());
    }

    #[test]
    fn bernoulli_prior_is_padded() {
        let mut cfg = example();
        cfg.prior = PriorSpec::Bernoulli { existence: 0.5, distribution: vec![0.25, 0.75] };
        let sc = cfg.build().unwrap();
        assert_eq!(sc.prior.n_max(), 4);
        assert_eq!(sc.prior.tensor(1), &[0.125, 0.375]);
    }
}
