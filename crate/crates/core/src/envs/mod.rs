//! Simulatable environments whose exact MDP is known.

mod builtin;
mod discretize;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use builtin::{
    chain, gridworld, slippery_chain, GridLayout, MountainCarDynamics, PendulumDynamics, CHAIN_BACK, CHAIN_FORWARD, GRID_DOWN,
    GRID_LEFT, GRID_RIGHT, GRID_UP,
};
pub use discretize::{discretize, ContinuousDynamics, DiscretizationSpec};

use crate::error::{Error, Result};
use crate::mdp::{validate_mdp, Mdp};

/// Episode runner over a known MDP with its own seeded generator.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    mdp: Arc<Mdp>,
    terminal: Vec<bool>,
    current_state: usize,
    step_count: usize,
    max_episode_steps: usize,
    finished: bool,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next_state: usize,
    pub reward: f64,
    /// Entered a terminal state.
    pub terminal: bool,
    /// Hit the episode step limit without terminating.
    pub truncated: bool,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

impl TabularEnv {
    pub fn new(mdp: Arc<Mdp>, max_episode_steps: usize, seed: u64) -> Self {
        let mut terminal = vec![false; mdp.n_states];
        for &t in &mdp.terminal_states {
            terminal[t] = true;
        }
        TabularEnv {
            mdp,
            terminal,
            current_state: 0,
            step_count: 0,
            max_episode_steps: max_episode_steps.max(1),
            finished: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mdp(&self) -> &Mdp {
        &self.mdp
    }

    pub fn shared_mdp(&self) -> Arc<Mdp> {
        Arc::clone(&self.mdp)
    }

    pub fn state(&self) -> usize {
        self.current_state
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn max_episode_steps(&self) -> usize {
        self.max_episode_steps
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    /// Draws a start state from `rho`.
    pub fn reset(&mut self) -> usize {
        self.current_state = self.mdp.sample_initial(&mut self.rng);
        self.step_count = 0;
        self.finished = false;
        self.current_state
    }

    /// Resets to a chosen start state without consuming randomness.
    pub fn reset_to(&mut self, s: usize) -> usize {
        assert!(s < self.mdp.n_states, "state {s} out of range");
        self.current_state = s;
        self.step_count = 0;
        self.finished = false;
        s
    }

    pub fn step(&mut self, a: usize) -> Result<StepOutcome> {
        if self.finished {
            return Err(Error::EpisodeFinished);
        }
        if a >= self.mdp.n_actions {
            return Err(Error::Config(format!("action {a} out of range")));
        }
        let s = self.current_state;
        let next_state = self.mdp.sample_next(s, a, &mut self.rng);
        let reward = crate::mdp::TabularModel::reward(self.mdp.as_ref(), s, a);
        self.step_count += 1;
        let terminal = self.terminal[next_state];
        let truncated = !terminal && self.step_count >= self.max_episode_steps;
        self.finished = terminal || truncated;
        self.current_state = next_state;
        Ok(StepOutcome {
            next_state,
            reward,
            terminal,
            truncated,
        })
    }
}

/// Built-in environment selection as it appears in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum EnvSpec {
    Chain {
        #[serde(default = "default_chain_length")]
        length: usize,
        #[serde(default = "default_chain_gamma")]
        gamma: f64,
    },
    Gridworld {
        #[serde(default = "default_grid_size")]
        size: usize,
        #[serde(default)]
        cliff: bool,
        #[serde(default)]
        step_penalty: f64,
        #[serde(default = "default_grid_gamma")]
        gamma: f64,
    },
    Pendulum {
        #[serde(default = "default_pendulum_bins")]
        angle_bins: usize,
        #[serde(default = "default_pendulum_bins")]
        velocity_bins: usize,
        #[serde(default = "default_torque_bins")]
        torque_bins: usize,
        #[serde(default = "default_pendulum_gamma")]
        gamma: f64,
    },
    MountainCar {
        #[serde(default = "default_car_bins")]
        position_bins: usize,
        #[serde(default = "default_car_bins")]
        velocity_bins: usize,
        #[serde(default = "default_force_bins")]
        force_bins: usize,
        #[serde(default = "default_car_gamma")]
        gamma: f64,
    },
    Custom {
        path: String,
        #[serde(default = "default_custom_steps")]
        max_episode_steps: usize,
    },
}

fn default_chain_length() -> usize {
    3
}
fn default_chain_gamma() -> f64 {
    0.9
}
fn default_grid_size() -> usize {
    20
}
fn default_grid_gamma() -> f64 {
    0.99
}
fn default_pendulum_bins() -> usize {
    15
}
fn default_torque_bins() -> usize {
    5
}
fn default_pendulum_gamma() -> f64 {
    0.95
}
fn default_car_bins() -> usize {
    20
}
fn default_force_bins() -> usize {
    3
}
fn default_car_gamma() -> f64 {
    0.99
}
fn default_custom_steps() -> usize {
    200
}

impl EnvSpec {
    pub fn chain(length: usize) -> Self {
        EnvSpec::Chain {
            length,
            gamma: default_chain_gamma(),
        }
    }

    pub fn gridworld(size: usize) -> Self {
        EnvSpec::Gridworld {
            size,
            cliff: false,
            step_penalty: 0.0,
            gamma: default_grid_gamma(),
        }
    }

    pub fn pendulum() -> Self {
        EnvSpec::Pendulum {
            angle_bins: default_pendulum_bins(),
            velocity_bins: default_pendulum_bins(),
            torque_bins: default_torque_bins(),
            gamma: default_pendulum_gamma(),
        }
    }

    pub fn mountain_car() -> Self {
        EnvSpec::MountainCar {
            position_bins: default_car_bins(),
            velocity_bins: default_car_bins(),
            force_bins: default_force_bins(),
            gamma: default_car_gamma(),
        }
    }

    /// Parses a short name as used on the command line.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "chain" => Ok(EnvSpec::chain(default_chain_length())),
            "gridworld" => Ok(EnvSpec::gridworld(default_grid_size())),
            "pendulum" => Ok(EnvSpec::pendulum()),
            "mountain_car" | "mountain-car" => Ok(EnvSpec::mountain_car()),
            other => Err(Error::Config(format!("unknown env name '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvSpec::Chain { .. } => "chain",
            EnvSpec::Gridworld { .. } => "gridworld",
            EnvSpec::Pendulum { .. } => "pendulum",
            EnvSpec::MountainCar { .. } => "mountain_car",
            EnvSpec::Custom { .. } => "custom",
        }
    }

    pub fn pendulum_grid(&self) -> Option<DiscretizationSpec> {
        match *self {
            EnvSpec::Pendulum {
                angle_bins,
                velocity_bins,
                torque_bins,
                ..
            } => {
                let p = PendulumDynamics::default();
                Some(DiscretizationSpec {
                    state_bins: vec![angle_bins, velocity_bins],
                    state_ranges: vec![(-std::f64::consts::PI, std::f64::consts::PI), (-p.max_speed, p.max_speed)],
                    action_bins: vec![torque_bins],
                })
            }
            _ => None,
        }
    }

    pub fn mountain_car_grid(&self) -> Option<DiscretizationSpec> {
        match *self {
            EnvSpec::MountainCar {
                position_bins,
                velocity_bins,
                force_bins,
                ..
            } => {
                let m = MountainCarDynamics::default();
                Some(DiscretizationSpec {
                    state_bins: vec![position_bins, velocity_bins],
                    state_ranges: vec![(m.min_position, m.max_position), (-m.max_speed, m.max_speed)],
                    action_bins: vec![force_bins],
                })
            }
            _ => None,
        }
    }

    pub fn build(&self) -> Result<BuiltEnv> {
        let (mdp, max_steps, schema) = match self {
            EnvSpec::Chain { length, gamma } => {
                let mdp = chain(*length, *gamma)?;
                let schema = EnvSchema {
                    env_name: "chain".into(),
                    n_states: mdp.n_states,
                    n_actions: mdp.n_actions,
                    state_schema: format!(
                        "integer state 0..{} along a line; the agent starts at 0 and state {} is the goal",
                        length - 1,
                        length - 1
                    ),
                    action_schema: "0 = move back one state, 1 = move forward one state".into(),
                    termination_conditions: format!(
                        "the episode ends with reward 1 when the agent enters state {}",
                        length - 1
                    ),
                    layout: Layout::Line { length: *length },
                };
                (mdp, 4 * length, schema)
            }
            EnvSpec::Gridworld {
                size,
                cliff,
                step_penalty,
                gamma,
            } => {
                let mdp = gridworld(*size, *cliff, *step_penalty, *gamma)?;
                let layout = GridLayout::new(*size, *cliff);
                let schema = EnvSchema {
                    env_name: "gridworld".into(),
                    n_states: mdp.n_states,
                    n_actions: mdp.n_actions,
                    state_schema: format!(
                        "integer state = row * {size} + column on a {size}x{size} grid, row 0 at the top; start {} and goal {}",
                        layout.start, layout.goal
                    ),
                    action_schema: "0 = up, 1 = right, 2 = down, 3 = left; moves into walls leave the state unchanged"
                        .into(),
                    termination_conditions: if *cliff {
                        "entering the goal pays 1 and ends the episode; entering a bottom-row cliff cell pays -1 and ends it"
                            .into()
                    } else {
                        "entering the goal pays 1 and ends the episode".into()
                    },
                    layout: Layout::Grid {
                        rows: *size,
                        cols: *size,
                    },
                };
                (mdp, 2 * size * size, schema)
            }
            EnvSpec::Pendulum { gamma, .. } => {
                let grid = self.pendulum_grid().expect("pendulum grid");
                let mdp = discretize(&PendulumDynamics::default(), &grid, *gamma)?;
                let schema = EnvSchema {
                    env_name: "pendulum".into(),
                    n_states: mdp.n_states,
                    n_actions: mdp.n_actions,
                    state_schema: format!(
                        "integer state = angle_bin * {v} + velocity_bin; {a} angle bins over [-pi, pi) with angle 0 upright, {v} velocity bins over [-8, 8]",
                        a = grid.state_bins[0],
                        v = grid.state_bins[1]
                    ),
                    action_schema: format!(
                        "integer torque bin 0..{} spread evenly over [-2, 2]; the middle bin applies no torque",
                        grid.action_bins[0] - 1
                    ),
                    termination_conditions: "no terminal state; episodes are cut after 100 steps; reward is -(angle^2 + 0.1 velocity^2 + 0.001 torque^2)".into(),
                    layout: Layout::Grid {
                        rows: grid.state_bins[0],
                        cols: grid.state_bins[1],
                    },
                };
                (mdp, 100, schema)
            }
            EnvSpec::MountainCar { gamma, .. } => {
                let grid = self.mountain_car_grid().expect("mountain car grid");
                let mdp = discretize(&MountainCarDynamics::default(), &grid, *gamma)?;
                let schema = EnvSchema {
                    env_name: "mountain_car".into(),
                    n_states: mdp.n_states,
                    n_actions: mdp.n_actions,
                    state_schema: format!(
                        "integer state = position_bin * {v} + velocity_bin; {p} position bins over [-1.2, 0.6], {v} velocity bins over [-0.07, 0.07]",
                        p = grid.state_bins[0],
                        v = grid.state_bins[1]
                    ),
                    action_schema: format!("integer force bin 0..{} spread over [-1, 1]", grid.action_bins[0] - 1),
                    termination_conditions: "reaching position 0.45 pays 1 and ends the episode".into(),
                    layout: Layout::Grid {
                        rows: grid.state_bins[0],
                        cols: grid.state_bins[1],
                    },
                };
                (mdp, 200, schema)
            }
            EnvSpec::Custom { path, max_episode_steps } => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read custom mdp {path}: {e}")))?;
                let mdp = Mdp::from_json(&text)?;
                let schema = EnvSchema {
                    env_name: "custom".into(),
                    n_states: mdp.n_states,
                    n_actions: mdp.n_actions,
                    state_schema: format!("integer state 0..{}", mdp.n_states - 1),
                    action_schema: format!("integer action 0..{}", mdp.n_actions - 1),
                    termination_conditions: format!("terminal states {:?}", mdp.terminal_states),
                    layout: Layout::Line { length: mdp.n_states },
                };
                (mdp, *max_episode_steps, schema)
            }
        };
        let violations = validate_mdp(&mdp);
        if !violations.is_empty() {
            let joined: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(Error::InvalidModel(joined.join("; ")));
        }
        Ok(BuiltEnv {
            spec: self.clone(),
            mdp: Arc::new(mdp),
            max_episode_steps: max_steps,
            schema,
        })
    }
}

/// How states map onto a 2-D display.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    Line { length: usize },
    Grid { rows: usize, cols: usize },
}

/// Textual description of an environment, rendered into LLM prompts and used
/// to range-check guidance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSchema {
    pub env_name: String,
    pub n_states: usize,
    pub n_actions: usize,
    pub state_schema: String,
    pub action_schema: String,
    pub termination_conditions: String,
    pub layout: Layout,
}

#[derive(Debug, Clone)]
pub struct BuiltEnv {
    pub spec: EnvSpec,
    pub mdp: Arc<Mdp>,
    pub max_episode_steps: usize,
    pub schema: EnvSchema,
}

impl BuiltEnv {
    pub fn instance(&self, seed: u64) -> TabularEnv {
        TabularEnv::new(Arc::clone(&self.mdp), self.max_episode_steps, seed)
    }
}
