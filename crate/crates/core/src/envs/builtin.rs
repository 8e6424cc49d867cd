use std::f64::consts::PI;

use super::discretize::ContinuousDynamics;
use crate::error::{Error, Result};
use crate::mdp::{reward_bounds, Mdp, MDP_SCHEMA_VERSION};

pub const CHAIN_BACK: usize = 0;
pub const CHAIN_FORWARD: usize = 1;

pub const GRID_UP: usize = 0;
pub const GRID_RIGHT: usize = 1;
pub const GRID_DOWN: usize = 2;
pub const GRID_LEFT: usize = 3;

/// Deterministic chain `s0 .. s_{L-1}`; moving forward from `s_{L-2}` enters
/// the terminal goal with reward 1. Backing off `s0` stays in place.
pub fn chain(length: usize, gamma: f64) -> Result<Mdp> {
    if length < 2 {
        return Err(Error::Config(format!("chain length {length} must be >= 2")));
    }
    let (ns, na) = (length, 2);
    let goal = length - 1;
    let mut rewards = vec![0.0; ns * na];
    let mut transitions = vec![0.0; ns * na * ns];
    for s in 0..ns {
        for a in 0..na {
            let z = s * na + a;
            let dest = if s == goal {
                goal
            } else if a == CHAIN_FORWARD {
                s + 1
            } else {
                s.saturating_sub(1)
            };
            transitions[z * ns + dest] = 1.0;
            if s != goal && dest == goal {
                rewards[z] = 1.0;
            }
        }
    }
    let mut rho = vec![0.0; ns];
    rho[0] = 1.0;
    Mdp::new(ns, na, rewards, transitions, gamma, rho, 0.0, 1.0, vec![goal])
}

/// Chain whose forward move fails with probability `slip`, leaving the agent
/// in place. Backing off `s0` stays in place; the last state is the goal.
pub fn slippery_chain(length: usize, slip: f64, gamma: f64) -> Result<Mdp> {
    if !(0.0..1.0).contains(&slip) {
        return Err(Error::Config(format!("slip {slip} must be in [0, 1)")));
    }
    let mut mdp = chain(length, gamma)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    for s in 0..length - 1 {
        let z = s * na + CHAIN_FORWARD;
        let row = &mut mdp.transitions[z * ns..(z + 1) * ns];
        row[s + 1] = 1.0 - slip;
        row[s] += slip;
        if s + 1 == length - 1 {
            // Only the successful move collects the goal reward.
            mdp.rewards[z] = 1.0 - slip;
        }
    }
    Ok(mdp)
}

/// Layout facts about a gridworld needed by scripted guidance.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLayout {
    pub size: usize,
    pub start: usize,
    pub goal: usize,
    pub cliffs: Vec<usize>,
}

impl GridLayout {
    pub fn new(size: usize, cliff: bool) -> Self {
        let cell = |r: usize, c: usize| r * size + c;
        if cliff {
            GridLayout {
                size,
                start: cell(size - 1, 0),
                goal: cell(size - 1, size - 1),
                cliffs: (1..size - 1).map(|c| cell(size - 1, c)).collect(),
            }
        } else {
            GridLayout {
                size,
                start: cell(0, 0),
                goal: cell(size - 1, size - 1),
                cliffs: Vec::new(),
            }
        }
    }

    pub fn move_from(&self, s: usize, a: usize) -> usize {
        let (r, c) = (s / self.size, s % self.size);
        let (r, c) = match a {
            GRID_UP => (r.saturating_sub(1), c),
            GRID_RIGHT => (r, (c + 1).min(self.size - 1)),
            GRID_DOWN => ((r + 1).min(self.size - 1), c),
            GRID_LEFT => (r, c.saturating_sub(1)),
            _ => unreachable!("gridworld has four actions"),
        };
        r * self.size + c
    }

    /// A shortest start-to-goal route as `(state, action)` pairs: down the
    /// first column then along the last row, or for the cliff variant up,
    /// across the row above the cliff, and back down.
    pub fn goal_route(&self) -> Vec<(usize, usize)> {
        let mut route = Vec::new();
        let mut s = self.start;
        let mut push = |s: &mut usize, a: usize| {
            route.push((*s, a));
            *s = self.move_from(*s, a);
        };
        if self.cliffs.is_empty() {
            while s / self.size < self.size - 1 {
                push(&mut s, GRID_DOWN);
            }
            while s != self.goal {
                push(&mut s, GRID_RIGHT);
            }
        } else {
            push(&mut s, GRID_UP);
            while s % self.size < self.size - 1 {
                push(&mut s, GRID_RIGHT);
            }
            push(&mut s, GRID_DOWN);
        }
        route
    }
}

/// `size x size` gridworld. Entering the goal pays 1 and ends the episode;
/// entering a cliff cell pays -1 and ends it. Every other move pays
/// `-step_penalty`.
pub fn gridworld(size: usize, cliff: bool, step_penalty: f64, gamma: f64) -> Result<Mdp> {
    if size < 2 || (cliff && size < 3) {
        return Err(Error::Config(format!("gridworld size {size} too small")));
    }
    if !(step_penalty >= 0.0 && step_penalty.is_finite()) {
        return Err(Error::Config("step_penalty must be finite and >= 0".into()));
    }
    let layout = GridLayout::new(size, cliff);
    let (ns, na) = (size * size, 4);
    let mut terminal = vec![layout.goal];
    terminal.extend(&layout.cliffs);
    let mut rewards = vec![0.0; ns * na];
    let mut transitions = vec![0.0; ns * na * ns];
    for s in 0..ns {
        for a in 0..na {
            let z = s * na + a;
            if terminal.contains(&s) {
                transitions[z * ns + s] = 1.0;
                continue;
            }
            let dest = layout.move_from(s, a);
            transitions[z * ns + dest] = 1.0;
            rewards[z] = if dest == layout.goal {
                1.0
            } else if layout.cliffs.contains(&dest) {
                -1.0
            } else {
                -step_penalty
            };
        }
    }
    let mut rho = vec![0.0; ns];
    rho[layout.start] = 1.0;
    let (r_min, r_max) = reward_bounds(&rewards);
    Ok(Mdp {
        schema_version: MDP_SCHEMA_VERSION,
        n_states: ns,
        n_actions: na,
        rewards,
        transitions,
        gamma,
        rho,
        r_min,
        r_max,
        terminal_states: terminal,
    })
}

fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

/// Torque-controlled pendulum with angle 0 upright. One tabular step spans
/// `substeps` semi-implicit Euler steps of length `dt`.
#[derive(Debug, Clone, Copy)]
pub struct PendulumDynamics {
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub max_speed: f64,
    pub max_torque: f64,
    pub dt: f64,
    pub substeps: usize,
}

impl Default for PendulumDynamics {
    fn default() -> Self {
        PendulumDynamics {
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            max_speed: 8.0,
            max_torque: 2.0,
            dt: 0.05,
            substeps: 4,
        }
    }
}

impl ContinuousDynamics for PendulumDynamics {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_bounds(&self) -> Vec<(f64, f64)> {
        vec![(-self.max_torque, self.max_torque)]
    }

    fn periodic(&self, dim: usize) -> bool {
        dim == 0
    }

    fn next_state(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let (mut theta, mut vel) = (x[0], x[1]);
        let torque = u[0].clamp(-self.max_torque, self.max_torque);
        let (g, m, l) = (self.gravity, self.mass, self.length);
        for _ in 0..self.substeps {
            let accel = 3.0 * g / (2.0 * l) * theta.sin() + 3.0 / (m * l * l) * torque;
            vel = (vel + accel * self.dt).clamp(-self.max_speed, self.max_speed);
            theta += vel * self.dt;
        }
        vec![wrap_angle(theta), vel]
    }

    fn reward(&self, x: &[f64], u: &[f64], _x_next: &[f64]) -> f64 {
        let theta = wrap_angle(x[0]);
        -(theta * theta + 0.1 * x[1] * x[1] + 0.001 * u[0] * u[0])
    }

    fn initial_region(&self) -> Option<Vec<(f64, f64)>> {
        Some(vec![(-PI, PI), (-1.0, 1.0)])
    }
}

/// Continuous mountain car with a sparse goal reward. One tabular step spans
/// `substeps` physics steps.
#[derive(Debug, Clone, Copy)]
pub struct MountainCarDynamics {
    pub power: f64,
    pub min_position: f64,
    pub max_position: f64,
    pub max_speed: f64,
    pub goal_position: f64,
    pub substeps: usize,
}

impl Default for MountainCarDynamics {
    fn default() -> Self {
        MountainCarDynamics {
            power: 0.0015,
            min_position: -1.2,
            max_position: 0.6,
            max_speed: 0.07,
            goal_position: 0.45,
            substeps: 5,
        }
    }
}

impl ContinuousDynamics for MountainCarDynamics {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_bounds(&self) -> Vec<(f64, f64)> {
        vec![(-1.0, 1.0)]
    }

    fn next_state(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let (mut pos, mut vel) = (x[0], x[1]);
        let force = u[0].clamp(-1.0, 1.0);
        for _ in 0..self.substeps {
            vel = (vel + force * self.power - 0.0025 * (3.0 * pos).cos()).clamp(-self.max_speed, self.max_speed);
            pos = (pos + vel).clamp(self.min_position, self.max_position);
            if pos <= self.min_position && vel < 0.0 {
                vel = 0.0;
            }
            if pos >= self.goal_position {
                break;
            }
        }
        vec![pos, vel]
    }

    /// `x_next` is the destination bin center, so the reward agrees with the
    /// terminal labelling of bins.
    fn reward(&self, _x: &[f64], _u: &[f64], x_next: &[f64]) -> f64 {
        if self.is_terminal(x_next) {
            1.0
        } else {
            0.0
        }
    }

    fn is_terminal(&self, x: &[f64]) -> bool {
        x[0] >= self.goal_position
    }

    fn initial_region(&self) -> Option<Vec<(f64, f64)>> {
        Some(vec![(-0.6, -0.4), (0.0, 0.0)])
    }
}
