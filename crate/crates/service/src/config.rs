use qshape_core::envs::{BuiltEnv, EnvSpec};
use qshape_core::heuristics::scripted_guidance;
use qshape_core::qlearn::{GuidanceMode, LearnerConfig, TrainOptions};
use qshape_llm::{build_prompt, LlmEndpoint, PromptTemplate};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Violation;

const ENV_NAMES: [&str; 5] = ["chain", "gridworld", "pendulum", "mountain_car", "custom"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmSettings {
    #[serde(default = "LlmEndpoint::from_env")]
    pub endpoint: LlmEndpoint,
    #[serde(default)]
    pub task_description: String,
    /// Prompt template file; the built-in template when absent.
    #[serde(default)]
    pub template_path: Option<String>,
    /// Ask for guidance once before training starts.
    #[serde(default)]
    pub request_at_start: bool,
}

impl LlmSettings {
    pub fn template(&self) -> qshape_llm::Result<PromptTemplate> {
        match &self.template_path {
            Some(path) => PromptTemplate::from_file(path, self.task_description.clone()),
            None => Ok(PromptTemplate::builtin(self.task_description.clone())),
        }
    }

    pub fn prompt(&self, env: &BuiltEnv, cap: f64, feedback: Option<&str>) -> qshape_llm::Result<String> {
        build_prompt(&self.template()?, &env.schema, cap, feedback)
    }
}

/// Everything needed to start a run. The learner's discount is always the
/// environment's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub label: String,
    pub env: EnvSpec,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default = "default_guidance_mode")]
    pub guidance_mode: GuidanceMode,
    /// Scripted guidance delivered at step 0.
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default)]
    pub llm: Option<LlmSettings>,
    #[serde(default = "default_budget")]
    pub budget: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default)]
    pub checkpoint_every: u64,
}

fn default_guidance_mode() -> GuidanceMode {
    TrainOptions::default().guidance_mode
}
fn default_budget() -> u64 {
    TrainOptions::default().budget
}
fn default_eval_every() -> u64 {
    TrainOptions::default().eval_every
}
fn default_eval_episodes() -> usize {
    TrainOptions::default().eval_episodes
}

impl RunConfig {
    pub fn new(env: EnvSpec) -> Self {
        serde_json::from_value(serde_json::json!({ "env": env })).expect("defaults deserialize")
    }

    /// Parses a JSON body. `env` may be an object or a bare env name.
    pub fn from_json(mut value: Value) -> Result<Self, Vec<Violation>> {
        let Some(obj) = value.as_object_mut() else {
            return Err(vec![Violation::new("body", "expected a JSON object")]);
        };
        match obj.get("env") {
            None => return Err(vec![Violation::new("env", "required")]),
            Some(Value::String(name)) => {
                let spec = EnvSpec::from_name(name).map_err(|_| vec![Violation::new("env", format!("unknown env '{name}'"))])?;
                obj.insert("env".into(), serde_json::to_value(spec).expect("spec serializes"));
            }
            Some(env) => match env.get("name").and_then(Value::as_str) {
                Some(name) if ENV_NAMES.contains(&name) => {}
                Some(name) => return Err(vec![Violation::new("env.name", format!("unknown env '{name}'"))]),
                None => return Err(vec![Violation::new("env.name", "required")]),
            },
        }
        serde_json::from_value(value).map_err(|e| vec![Violation::new("body", e)])
    }

    /// Checks every field and builds the environment.
    pub fn validate(&self) -> Result<BuiltEnv, Vec<Violation>> {
        let mut v = Vec::new();
        if self.budget == 0 {
            v.push(Violation::new("budget", "must be > 0"));
        }
        if self.eval_every == 0 {
            v.push(Violation::new("eval_every", "must be > 0"));
        }
        if self.eval_episodes == 0 {
            v.push(Violation::new("eval_episodes", "must be > 0"));
        }
        let env = match self.env.build() {
            Ok(env) => Some(env),
            Err(e) => {
                v.push(Violation::new("env", e));
                None
            }
        };
        if let Some(env) = &env {
            if let Err(e) = self.learner_config(env).validate() {
                v.push(Violation::new("learner", e));
            }
            if let Some(s) = &self.scenario {
                if let Err(e) = scripted_guidance(s, env) {
                    v.push(Violation::new("scenario", e));
                }
            }
            if let Some(llm) = &self.llm {
                if let Err(e) = llm.endpoint.validate() {
                    v.push(Violation::new("llm.endpoint", e));
                }
                if let Err(e) = llm.prompt(env, env.mdp.cap(), None) {
                    v.push(Violation::new("llm.template_path", e));
                }
            }
        }
        match env {
            Some(env) if v.is_empty() => Ok(env),
            _ => Err(v),
        }
    }

    pub fn learner_config(&self, env: &BuiltEnv) -> LearnerConfig {
        LearnerConfig {
            gamma: env.mdp.gamma,
            ..self.learner.clone()
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            budget: self.budget,
            eval_every: self.eval_every,
            eval_episodes: self.eval_episodes,
            checkpoint_every: self.checkpoint_every,
            guidance_mode: self.guidance_mode,
        }
    }
}
