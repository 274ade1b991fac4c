//! Experiment configuration files.
//!
//! A config is a strict JSON document. Unknown keys are rejected, and the
//! physical parameters (flow, `dt`, horizon, `β`, `ν`, gains) have no
//! defaults. Learner and sampler settings may be omitted.
//!
//! ```json
//! {
//!   "experiment": "train",
//!   "seed": 7,
//!   "env": {
//!     "flow": { "kind": "bk", "diffusivity": 0.04, "dim": 3, "kappa": 1e-4 },
//!     "dt": 0.01, "horizon": 10.0, "beta": 0.1, "nu": 0.1, "max_sep": 1000.0,
//!     "init": { "kind": "gaussian", "std": 0.2887 }
//!   },
//!   "agent": { "kind": "ap", "phi": 0.574166 },
//!   "training": { "episodes": 250 }
//! }
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use swimrl::flows::{FlowSpec, IntegratorConfig};
use swimrl::training::{
    AgentConfig, Environment, HistogramConfig, HybridConfig, InitialDistribution, LyapunovConfig, SteadyConfig,
    TrainConfig, ValueValidationConfig,
};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Lyapunov,
    ValidateDist,
    ValidateValue,
    Train,
    Eval,
    Compare,
    HybridEval,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Lyapunov => "lyapunov",
            Command::ValidateDist => "validate-dist",
            Command::ValidateValue => "validate-value",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Compare => "compare",
            Command::HybridEval => "hybrid-eval",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Flow, time step, horizon and reward shared by every experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub flow: FlowSpec,
    pub dt: f64,
    /// Episode length `T`; must be a whole number of steps.
    pub horizon: f64,
    pub beta: f64,
    pub nu: f64,
    /// Separations beyond this abort the episode.
    pub max_sep: f64,
    pub init: InitialDistribution,
}

impl EnvConfig {
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn environment(&self) -> swimrl::Result<Environment> {
        Environment::new(self.flow, IntegratorConfig::new(self.dt, self.max_sep)?)
    }
}

pub const DEFAULT_EVAL_EPISODES: usize = 500;
pub const DEFAULT_EVAL_EVERY: usize = 25;
pub const DEFAULT_CURVE_EPISODES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub episodes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_episodes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve_episodes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovSection {
    pub t_window: f64,
    pub samples: usize,
    /// Reward weight used to turn `D̃` into `φ*`.
    pub beta: f64,
}

/// Externally supplied Cramér fit, used instead of running `lyapunov`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub lambda_bar: f64,
    pub s1_curv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteadySection {
    pub dt: f64,
    pub walkers: usize,
    pub burn_in: f64,
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionSection {
    pub phis: Vec<f64>,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resample_bins: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walkers_per_bin: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram_bins: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_hi: Option<f64>,
    /// Steady second-moment check (BK only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steady: Option<SteadySection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueSection {
    pub phi: f64,
    /// Required on ABC flow.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_tilde: Option<f64>,
    pub times: Vec<f64>,
    pub radii: Vec<f64>,
    pub rollouts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    /// Gains of the PC-vs-AP table; one AP is trained per gain.
    #[serde(default)]
    pub phis: Vec<f64>,
    /// Evaluation summaries to tabulate instead of running the table.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Command,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub env: EnvConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<AgentConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lyapunov: Option<LyapunovSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<DistributionSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<ValueSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hybrid: Option<HybridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareSection>,
    /// Trained agent for `eval` and `hybrid-eval`, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

/// Parses a config document. Errors carry the line, column and key path.
pub fn parse_config(text: &str, origin: &Path) -> Result<ExperimentConfig, CliError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let key = e.path().to_string();
        let inner = e.into_inner();
        CliError::Config(format!(
            "{}:{}:{}: key `{}`: {}",
            origin.display(),
            inner.line(),
            inner.column(),
            key,
            strip_position(&inner.to_string())
        ))
    })?;
    de.end().map_err(|e| CliError::Config(format!("{}:{}:{}: {}", origin.display(), e.line(), e.column(), e)))?;
    Ok(cfg)
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text, path)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_json<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config serialises");
    hex(&Sha256::digest(text.as_bytes()))
}

impl ExperimentConfig {
    /// Hash of everything that affects results; `out` and `workers` are
    /// excluded.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        c.workers = None;
        sha256_json(&c)
    }

    pub fn env_hash(&self) -> String {
        sha256_json(&self.env)
    }

    fn invalid(&self, key: &str, msg: impl fmt::Display) -> CliError {
        CliError::Config(format!("key `{key}`: {msg}"))
    }

    /// Checks the physical parameters and that `command` has the sections it
    /// needs.
    pub fn validate(&self, command: Command) -> Result<(), CliError> {
        if self.experiment != command {
            return Err(self.invalid("experiment", format!("config is for `{}`, not `{command}`", self.experiment)));
        }
        self.env.flow.validate().map_err(|e| self.invalid("env.flow", e))?;
        let e = &self.env;
        if !(e.dt > 0.0) || !(e.horizon > 0.0) {
            return Err(self.invalid("env.dt", "dt and horizon must be positive"));
        }
        let steps = e.horizon / e.dt;
        if (steps - steps.round()).abs() > 1e-6 * steps.max(1.0) {
            return Err(self.invalid("env.horizon", format!("horizon {} is not a whole number of steps of {}", e.horizon, e.dt)));
        }
        if !(e.beta >= 0.0) || !(e.nu >= 0.0) || !(e.max_sep > 0.0) {
            return Err(self.invalid("env", "need beta >= 0, nu >= 0, max_sep > 0"));
        }
        if let Some(0) = self.workers {
            return Err(self.invalid("workers", "must be at least 1"));
        }
        let need = |present: bool, key: &str| {
            if present {
                Ok(())
            } else {
                Err(self.invalid(key, format!("section required by `{command}`")))
            }
        };
        match command {
            Command::Lyapunov => need(self.lyapunov.is_some(), "lyapunov"),
            Command::ValidateDist => {
                need(self.distribution.is_some(), "distribution")?;
                let d = self.distribution.as_ref().unwrap();
                if matches!(e.flow, FlowSpec::Abc(_)) && d.fit.is_none() && self.lyapunov.is_none() {
                    return Err(self.invalid("distribution.fit", "ABC flow needs `fit` or a `lyapunov` section"));
                }
                Ok(())
            }
            Command::ValidateValue => {
                need(self.value.is_some(), "value")?;
                let v = self.value.as_ref().unwrap();
                if matches!(e.flow, FlowSpec::Abc(_)) && v.d_tilde.is_none() {
                    return Err(self.invalid("value.d_tilde", "required on ABC flow"));
                }
                if v.times.iter().any(|&t| !(0.0..=e.horizon).contains(&t)) {
                    return Err(self.invalid("value.times", "times must lie in [0, horizon]"));
                }
                Ok(())
            }
            Command::Train => {
                need(self.agent.is_some(), "agent")?;
                need(self.training.is_some(), "training")
            }
            Command::Eval | Command::HybridEval => need(self.checkpoint.is_some(), "checkpoint"),
            Command::Compare => {
                need(self.compare.is_some(), "compare")?;
                let c = self.compare.as_ref().unwrap();
                if c.inputs.is_empty() {
                    need(self.agent.is_some(), "agent")?;
                    need(self.training.is_some(), "training")?;
                    if c.phis.is_empty() {
                        return Err(self.invalid("compare.phis", "give gains to compare or `inputs` to tabulate"));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let tr = self.training.as_ref();
        TrainConfig {
            episodes: tr.map_or(0, |t| t.episodes),
            steps: self.env.steps(),
            dt: self.env.dt,
            nu: self.env.nu,
            beta: self.env.beta,
            init: self.env.init.clone(),
            seed: self.seed,
            max_sep: self.env.max_sep,
            eval_episodes: tr.and_then(|t| t.eval_episodes).unwrap_or(DEFAULT_EVAL_EPISODES),
            eval_every: tr.and_then(|t| t.eval_every).unwrap_or(DEFAULT_EVAL_EVERY),
            curve_episodes: tr.and_then(|t| t.curve_episodes).unwrap_or(DEFAULT_CURVE_EPISODES),
        }
    }

    pub fn lyapunov_config(&self) -> Option<LyapunovConfig> {
        self.lyapunov.as_ref().map(|l| LyapunovConfig {
            t_window: l.t_window,
            samples: l.samples,
            dt: self.env.dt,
            seed: self.seed,
            beta: l.beta,
        })
    }

    pub fn histogram_config(&self) -> Option<HistogramConfig> {
        let d = self.distribution.as_ref()?;
        let mut h = HistogramConfig::new(self.env.dt, self.seed, d.iterations);
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = d.$f { h.$f = v; } )* };
        }
        set!(resample_bins, walkers_per_bin, tau, burn_in, lo, hi, histogram_bins, fit_lo);
        h.fit_hi = d.fit_hi;
        Some(h)
    }

    pub fn steady_config(&self) -> Option<SteadyConfig> {
        let s = self.distribution.as_ref()?.steady.as_ref()?;
        Some(SteadyConfig { dt: s.dt, walkers: s.walkers, burn_in: s.burn_in, duration: s.duration, seed: self.seed })
    }

    pub fn value_config(&self) -> Option<ValueValidationConfig> {
        let v = self.value.as_ref()?;
        Some(ValueValidationConfig {
            dt: self.env.dt,
            times: v.times.clone(),
            radii: v.radii.clone(),
            rollouts: v.rollouts,
            seed: self.seed,
        })
    }
}
