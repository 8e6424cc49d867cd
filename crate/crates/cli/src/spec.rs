//! Experiment selection: defaults per experiment, then the TOML config,
//! then command-line flags.

use std::path::{Path, PathBuf};

use qshape_core::analysis::{InjectionSchedule, Lemma2Config};
use qshape_core::envs::{BuiltEnv, EnvSpec};
use qshape_core::qlearn::ShapingMode;
use qshape_service::RunConfig;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Theorem1,
    Lemma2,
    Theorem2,
    Suboptimality,
    Efficiency,
    Adaptability,
}

impl Experiment {
    pub fn parse(name: &str) -> Result<Self, CliError> {
        serde_json::from_value(Value::String(name.to_string()))
            .map_err(|_| CliError::Config(format!("unknown experiment '{name}'")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Theorem1 => "theorem1",
            Experiment::Lemma2 => "lemma2",
            Experiment::Theorem2 => "theorem2",
            Experiment::Suboptimality => "suboptimality",
            Experiment::Efficiency => "efficiency",
            Experiment::Adaptability => "adaptability",
        }
    }

    fn default_seeds(self) -> Vec<u64> {
        match self {
            Experiment::Theorem1 => (0..50).collect(),
            Experiment::Efficiency | Experiment::Adaptability => (0..10).collect(),
            _ => vec![0],
        }
    }

    /// Run config the experiment starts from before overrides.
    fn default_run(self) -> Value {
        match self {
            Experiment::Efficiency => json!({
                "env": EnvSpec::gridworld(20),
                "budget": 100_000,
                "guidance_mode": "offline",
                "scenario": "good_goal",
            }),
            Experiment::Adaptability => json!({
                "env": EnvSpec::pendulum(),
                "budget": 100_000,
                "guidance_mode": "online",
                "scenario": "wrong_pendulum",
            }),
            // The theory suites draw their own models; the run config only
            // supplies a label.
            _ => json!({ "env": EnvSpec::chain(5) }),
        }
    }
}

/// Settings for the model-based suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TheoryParams {
    pub gamma: f64,
    pub sweeps_guided: usize,
    pub models: usize,
    pub probes: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub trials: usize,
}

impl Default for TheoryParams {
    fn default() -> Self {
        TheoryParams {
            gamma: 0.9,
            sweeps_guided: 100,
            models: 100,
            probes: 10,
            n_states: 4,
            n_actions: 2,
            epsilon: 0.1,
            delta: 0.05,
            trials: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub experiment: Experiment,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub run: RunConfig,
    pub env: BuiltEnv,
    pub schedules: Vec<InjectionSchedule>,
    pub modes: Vec<ShapingMode>,
    pub theory: TheoryParams,
    /// Dataset sampling for the bound check: `per_pair` draws per
    /// state-action pair.
    pub lemma2: Lemma2Config,
}

impl ExperimentSpec {
    /// Label used in file names.
    pub fn env_label(&self) -> &'static str {
        match self.experiment {
            Experiment::Theorem1 | Experiment::Theorem2 | Experiment::Suboptimality => "random",
            Experiment::Lemma2 => "slippery_chain",
            _ => self.run.env.name(),
        }
    }
}

#[derive(Debug, Default, Clone)]
pub struct Flags {
    pub experiment: Option<String>,
    pub env: Option<String>,
    pub seeds: Option<String>,
    pub schedule: Option<String>,
    pub mode: Option<String>,
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// `N` means seeds `0..N`; `a..b` a range; `a,b,c` a list.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Config(format!("cannot parse seeds '{text}'"));
    let text = text.trim();
    let seeds: Vec<u64> = if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        (a..b).collect()
    } else if text.contains(',') {
        text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    } else {
        (0..text.parse::<u64>().map_err(|_| bad())?).collect()
    };
    validate_seeds(seeds)
}

fn validate_seeds(seeds: Vec<u64>) -> Result<Vec<u64>, CliError> {
    if seeds.is_empty() {
        return Err(CliError::Config("seeds must be non-empty".into()));
    }
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(CliError::Config("seeds must be distinct".into()));
    }
    Ok(seeds)
}

fn parse_mode(name: &str) -> Result<ShapingMode, CliError> {
    serde_json::from_value(Value::String(name.to_string())).map_err(|_| CliError::Config(format!("unknown mode '{name}'")))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                // Replacing the env selects a different env, so its table
                // replaces rather than merges.
                if k == "env" {
                    b.insert(k, v);
                } else {
                    merge(b.entry(k).or_insert(Value::Null), v);
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn take<T: serde::de::DeserializeOwned>(table: &mut serde_json::Map<String, Value>, key: &str) -> Result<Option<T>, CliError> {
    table
        .remove(key)
        .map(|v| serde_json::from_value(v).map_err(|e| CliError::Config(format!("{key}: {e}"))))
        .transpose()
}

fn read_config(path: &Path) -> Result<serde_json::Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let value: Value = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    match value {
        Value::Object(map) => Ok(map),
        _ => Err(CliError::Config(format!("{}: expected a table", path.display()))),
    }
}

pub fn resolve(flags: &Flags) -> Result<ExperimentSpec, CliError> {
    let mut file = match &flags.config {
        Some(path) => read_config(path)?,
        None => serde_json::Map::new(),
    };
    let file_experiment: Option<String> = take(&mut file, "experiment")?;
    let name = flags
        .experiment
        .clone()
        .or(file_experiment)
        .ok_or_else(|| CliError::Config("no experiment given (--experiment or `experiment` in the config)".into()))?;
    let experiment = Experiment::parse(&name)?;

    let file_seeds: Option<Value> = take(&mut file, "seeds")?;
    let seeds = match (&flags.seeds, file_seeds) {
        (Some(text), _) => parse_seeds(text)?,
        (None, Some(Value::String(text))) => parse_seeds(&text)?,
        (None, Some(Value::Number(n))) => parse_seeds(&n.to_string())?,
        (None, Some(list)) => validate_seeds(serde_json::from_value(list).map_err(|e| CliError::Config(format!("seeds: {e}")))?)?,
        (None, None) => experiment.default_seeds(),
    };
    let file_out: Option<PathBuf> = take(&mut file, "out")?;
    let out = flags.out.clone().or(file_out).unwrap_or_else(|| PathBuf::from("results"));
    let file_schedule: Option<String> = take(&mut file, "schedule")?;
    let schedules = match flags.schedule.clone().or(file_schedule) {
        Some(s) => vec![InjectionSchedule::parse(&s).map_err(|e| CliError::Config(e.to_string()))?],
        None => InjectionSchedule::ALL.to_vec(),
    };
    let file_mode: Option<String> = take(&mut file, "mode")?;
    let mode = flags.mode.clone().or(file_mode).map(|m| parse_mode(&m)).transpose()?;
    let theory: TheoryParams = take(&mut file, "theory")?.unwrap_or_default();
    let lemma2: Lemma2Config = take(&mut file, "lemma2")?.unwrap_or_default();

    let mut run = experiment.default_run();
    merge(&mut run, Value::Object(file));
    if let Some(env) = &flags.env {
        let spec = EnvSpec::from_name(env).map_err(|e| CliError::Config(e.to_string()))?;
        run["env"] = serde_json::to_value(spec).expect("spec serializes");
    }
    let mut run = RunConfig::from_json(run).map_err(violations)?;
    let modes = match mode {
        Some(m) => {
            run.learner.shaping_mode = m;
            vec![m]
        }
        None => vec![ShapingMode::QHeuristic, ShapingMode::RewardShaping],
    };
    let env = run.validate().map_err(violations)?;
    Ok(ExperimentSpec {
        experiment,
        seeds,
        out,
        run,
        env,
        schedules,
        modes,
        theory,
        lemma2,
    })
}

fn violations(v: Vec<qshape_service::Violation>) -> CliError {
    CliError::Config(v.iter().map(|v| format!("{}: {}", v.field, v.message)).collect::<Vec<_>>().join("; "))
}
