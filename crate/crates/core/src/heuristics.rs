//! Analytic heuristic terms and scripted guidance scenarios.
//!
//! Zero denominators and `ln 0` produce `+inf`. The TD target clamp turns
//! that into `+cap` when a term is used as `h`.

use serde::{Deserialize, Serialize};

use crate::envs::{BuiltEnv, EnvSpec, GridLayout, CHAIN_FORWARD};
use crate::error::{Error, Result};
use crate::mdp::{EmpiricalDataset, Policy, TabularModel};
use crate::qlearn::{GuidanceSet, GuidanceSource, GuidanceTriple};

/// Value returned where a formula divides by zero or takes `ln 0`.
pub const INFINITE_SENTINEL: f64 = f64::INFINITY;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeuristicKind {
    NegLogPolicy,
    EpisodicReturn,
    UctBonus,
    LcbPenalty,
    ExternalPairs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicParams {
    pub c_uct: f64,
    pub c_lcb: f64,
    pub horizon: f64,
    pub delta: f64,
    pub gamma: f64,
    /// First index `t'` of the return sum.
    pub t_start: usize,
}

impl Default for HeuristicParams {
    fn default() -> Self {
        HeuristicParams {
            c_uct: 1.0,
            c_lcb: 1.0,
            horizon: 100.0,
            delta: 0.05,
            gamma: 0.99,
            t_start: 0,
        }
    }
}

/// Visit counts `N(s)` and `N(s, a)`. Real-valued so pseudo-counts work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub state_counts: Vec<f64>,
    pub pair_counts: Vec<f64>,
}

impl CountTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        CountTable {
            n_states,
            n_actions,
            state_counts: vec![0.0; n_states],
            pair_counts: vec![0.0; n_states * n_actions],
        }
    }

    pub fn from_dataset(d: &EmpiricalDataset) -> Self {
        let (ns, na) = (d.n_states(), d.n_actions());
        let pair_counts: Vec<f64> = d.counts().iter().map(|&c| c as f64).collect();
        let state_counts = (0..ns).map(|s| pair_counts[s * na..(s + 1) * na].iter().sum()).collect();
        CountTable {
            n_states: ns,
            n_actions: na,
            state_counts,
            pair_counts,
        }
    }

    pub fn state(&self, s: usize) -> f64 {
        self.state_counts[s]
    }

    pub fn pair(&self, s: usize, a: usize) -> f64 {
        self.pair_counts[s * self.n_actions + a]
    }

    pub fn record(&mut self, s: usize, a: usize) {
        self.state_counts[s] += 1.0;
        self.pair_counts[s * self.n_actions + a] += 1.0;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicTerm {
    pub kind: HeuristicKind,
    #[serde(default)]
    pub params: HeuristicParams,
    #[serde(default)]
    pub counts: Option<CountTable>,
    /// Triples for `external_pairs`.
    #[serde(default)]
    pub pairs: Vec<GuidanceTriple>,
}

impl HeuristicTerm {
    pub fn new(kind: HeuristicKind, params: HeuristicParams) -> Self {
        HeuristicTerm {
            kind,
            params,
            counts: None,
            pairs: Vec::new(),
        }
    }

    pub fn with_counts(mut self, counts: CountTable) -> Self {
        self.counts = Some(counts);
        self
    }

    pub fn external(set: &GuidanceSet) -> Self {
        HeuristicTerm {
            pairs: set.triples.clone(),
            ..HeuristicTerm::new(HeuristicKind::ExternalPairs, HeuristicParams::default())
        }
    }

    fn counts(&self) -> Result<&CountTable> {
        let c = self
            .counts
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{:?} needs a count table", self.kind)))?;
        if c.state_counts.iter().chain(&c.pair_counts).any(|&n| n < 0.0 || !n.is_finite()) {
            return Err(Error::Config("counts must be finite and non-negative".into()));
        }
        Ok(c)
    }
}

fn positive(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::Config(format!("{name} must be finite and positive, got {v}")))
    }
}

/// Evaluates one heuristic row at `(s, a)`.
pub fn eval_heuristic(
    term: &HeuristicTerm,
    s: usize,
    a: usize,
    pi: Option<&Policy>,
    episode: Option<&[f64]>,
) -> Result<f64> {
    let p = &term.params;
    match term.kind {
        HeuristicKind::NegLogPolicy => {
            let pi = pi.ok_or_else(|| Error::Config("neg_log_policy needs a policy".into()))?;
            let prob = pi.prob(s, a);
            Ok(if prob <= 0.0 { INFINITE_SENTINEL } else { -prob.ln() })
        }
        HeuristicKind::EpisodicReturn => {
            let rewards = episode.ok_or_else(|| Error::Config("episodic_return needs episode rewards".into()))?;
            Ok(rewards
                .iter()
                .enumerate()
                .skip(p.t_start)
                .map(|(t, r)| p.gamma.powi(t as i32) * r)
                .sum())
        }
        HeuristicKind::UctBonus => {
            let c = term.counts()?;
            let (n_s, n_sa) = (c.state(s), c.pair(s, a));
            if n_sa == 0.0 {
                return Ok(INFINITE_SENTINEL);
            }
            Ok(positive("c_uct", p.c_uct)? * (n_s.ln() / n_sa).sqrt())
        }
        HeuristicKind::LcbPenalty => {
            let c = term.counts()?;
            let h = positive("horizon", p.horizon)?;
            let delta = positive("delta", p.delta)?;
            let size = (c.n_states * c.n_actions) as f64;
            let log_term = (h * size / delta).ln();
            Ok(positive("c_lcb", p.c_lcb)? * (h * h * log_term / c.pair(s, a).max(1.0)).sqrt())
        }
        HeuristicKind::ExternalPairs => {
            // Last triple at the pair wins, as in sanitization.
            Ok(term
                .pairs
                .iter()
                .rev()
                .find(|t| t.state == s && t.action == a)
                .map_or(0.0, |t| t.q_value))
        }
    }
}

pub const SCENARIOS: [&str; 3] = ["good_goal", "bad_lazy", "wrong_pendulum"];

/// Deterministic guidance for tests and experiments.
///
/// * `good_goal`: the chain's goal-entering pair, or every pair on a shortest
///   gridworld route to the goal, at `+cap`.
/// * `bad_lazy`: every non-terminal pair whose action certainly leaves the
///   state unchanged, at `-cap`.
/// * `wrong_pendulum`: the hanging-at-rest bins (the two angle bins next to
///   the bottom, the zero-velocity bin) under zero torque, at `+cap`.
pub fn scripted_guidance(scenario: &str, env: &BuiltEnv) -> Result<GuidanceSet> {
    let mdp = &env.mdp;
    let cap = mdp.cap();
    let triples = match (scenario, &env.spec) {
        ("good_goal", EnvSpec::Chain { length, .. }) => vec![GuidanceTriple::new(length - 2, CHAIN_FORWARD, cap)],
        ("good_goal", EnvSpec::Gridworld { size, cliff, .. }) => GridLayout::new(*size, *cliff)
            .goal_route()
            .into_iter()
            .map(|(s, a)| GuidanceTriple::new(s, a, cap))
            .collect(),
        ("bad_lazy", _) => {
            let mut out = Vec::new();
            for s in 0..mdp.n_states {
                if mdp.is_terminal(s) {
                    continue;
                }
                for a in 0..mdp.n_actions {
                    if mdp.transition_row(s, a)[s] == 1.0 {
                        out.push(GuidanceTriple::new(s, a, -cap));
                    }
                }
            }
            out
        }
        ("wrong_pendulum", spec @ EnvSpec::Pendulum { .. }) => {
            let grid = spec.pendulum_grid().expect("pendulum grid");
            let (angles, vels) = (grid.state_bins[0], grid.state_bins[1]);
            let zero_torque = (grid.action_bins[0] - 1) / 2;
            let zero_vel = (vels - 1) / 2;
            [0, angles - 1]
                .into_iter()
                .map(|ab| GuidanceTriple::new(grid.flat_state(&[ab, zero_vel]), zero_torque, cap))
                .collect()
        }
        (name, spec) if SCENARIOS.contains(&name) => {
            return Err(Error::Config(format!(
                "scenario {name} is not defined for env {}",
                spec.name()
            )))
        }
        (name, _) => return Err(Error::Config(format!("unknown scenario {name}"))),
    };
    if triples.is_empty() {
        return Err(Error::Config(format!("scenario {scenario} produced no triples on {}", env.spec.name())));
    }
    Ok(GuidanceSet::new(GuidanceSource::Scripted, triples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(n_s: f64, n_sa: f64) -> CountTable {
        CountTable {
            n_states: 1,
            n_actions: 1,
            state_counts: vec![n_s],
            pair_counts: vec![n_sa],
        }
    }

    #[test]
    fn neg_log_of_certain_action_is_zero() {
        let pi = Policy::deterministic(2, &[1]);
        let t = HeuristicTerm::new(HeuristicKind::NegLogPolicy, HeuristicParams::default());
        assert_eq!(eval_heuristic(&t, 0, 1, Some(&pi), None).unwrap(), 0.0);
        assert_eq!(eval_heuristic(&t, 0, 0, Some(&pi), None).unwrap(), INFINITE_SENTINEL);
    }

    #[test]
    fn uct_hand_value() {
        let t = HeuristicTerm::new(HeuristicKind::UctBonus, HeuristicParams::default())
            .with_counts(counts(std::f64::consts::E, 1.0));
        assert!((eval_heuristic(&t, 0, 0, None, None).unwrap() - 1.0).abs() < 1e-12);
        let unvisited = HeuristicTerm::new(HeuristicKind::UctBonus, HeuristicParams::default()).with_counts(counts(3.0, 0.0));
        assert_eq!(eval_heuristic(&unvisited, 0, 0, None, None).unwrap(), INFINITE_SENTINEL);
    }

    #[test]
    fn episodic_return_hand_value() {
        let t = HeuristicTerm::new(
            HeuristicKind::EpisodicReturn,
            HeuristicParams {
                gamma: 0.5,
                ..HeuristicParams::default()
            },
        );
        assert_eq!(eval_heuristic(&t, 0, 0, None, Some(&[1.0, 1.0])).unwrap(), 1.5);
    }

    #[test]
    fn missing_inputs_are_config_errors() {
        let t = HeuristicTerm::new(HeuristicKind::LcbPenalty, HeuristicParams::default());
        assert!(matches!(eval_heuristic(&t, 0, 0, None, None), Err(Error::Config(_))));
        let t = HeuristicTerm::new(HeuristicKind::NegLogPolicy, HeuristicParams::default());
        assert!(eval_heuristic(&t, 0, 0, None, None).is_err());
    }

    #[test]
    fn chain_good_goal() {
        let env = EnvSpec::chain(3).build().unwrap();
        let g = scripted_guidance("good_goal", &env).unwrap();
        assert_eq!(g.triples, vec![GuidanceTriple::new(1, CHAIN_FORWARD, env.mdp.cap())]);
        assert_eq!(g.source, GuidanceSource::Scripted);
    }

    #[test]
    fn wrong_pendulum_targets_hanging_rest() {
        let env = EnvSpec::pendulum().build().unwrap();
        let grid = env.spec.pendulum_grid().unwrap();
        let g = scripted_guidance("wrong_pendulum", &env).unwrap();
        assert!(!g.triples.is_empty());
        for t in &g.triples {
            let x = grid.state_center(t.state);
            assert!(x[0].abs() > std::f64::consts::PI - 2.0 * std::f64::consts::PI / 15.0);
            assert!(x[1].abs() < 1e-9);
            assert_eq!(t.q_value, env.mdp.cap());
        }
    }

    #[test]
    fn unknown_scenario_rejected() {
        let env = EnvSpec::chain(3).build().unwrap();
        assert!(matches!(scripted_guidance("be_nice", &env), Err(Error::Config(_))));
        assert!(scripted_guidance("wrong_pendulum", &env).is_err());
    }
}
