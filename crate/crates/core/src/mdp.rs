//! Tabular MDP representations: true models, transition datasets and the
//! empirical model estimated from them, and stochastic policies.
//!
//! All arrays are dense and row-major. A state-action pair `(s, a)` is
//! flattened to `s * n_actions + a`; transition rows are indexed by that pair
//! and hold `n_states` next-state probabilities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MDP_SCHEMA_VERSION: u32 = 1;
pub const DATASET_SCHEMA_VERSION: u32 = 1;

const ROW_SUM_TOL: f64 = 1e-12;

/// Read access to an `(r, P)` pair. Implemented by the true model and by the
/// empirical model of a dataset, so every oracle runs on either.
pub trait TabularModel {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn reward(&self, s: usize, a: usize) -> f64;
    fn transition_row(&self, s: usize, a: usize) -> &[f64];

    fn n_pairs(&self) -> usize {
        self.n_states() * self.n_actions()
    }
}

/// Owned `(r, P)` arrays without the episodic metadata of an [`Mdp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub n_states: usize,
    pub n_actions: usize,
    pub rewards: Vec<f64>,
    pub transitions: Vec<f64>,
}

impl TabularModel for Model {
    fn n_states(&self) -> usize {
        self.n_states
    }
    fn n_actions(&self) -> usize {
        self.n_actions
    }
    fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }
    fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let z = s * self.n_actions + a;
        &self.transitions[z * self.n_states..(z + 1) * self.n_states]
    }
}

/// A full tabular MDP: expected rewards, transition kernel, discount,
/// initial-state distribution and reward bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mdp {
    #[serde(default = "mdp_schema_version")]
    pub schema_version: u32,
    pub n_states: usize,
    pub n_actions: usize,
    /// Expected reward per pair, length `n_states * n_actions`.
    pub rewards: Vec<f64>,
    /// Row-stochastic kernel, length `n_states * n_actions * n_states`.
    pub transitions: Vec<f64>,
    pub gamma: f64,
    pub rho: Vec<f64>,
    pub r_min: f64,
    pub r_max: f64,
    #[serde(default)]
    pub terminal_states: Vec<usize>,
}

fn mdp_schema_version() -> u32 {
    MDP_SCHEMA_VERSION
}

impl TabularModel for Mdp {
    fn n_states(&self) -> usize {
        self.n_states
    }
    fn n_actions(&self) -> usize {
        self.n_actions
    }
    fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }
    fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let z = s * self.n_actions + a;
        &self.transitions[z * self.n_states..(z + 1) * self.n_states]
    }
}

impl Mdp {
    /// Builds an MDP and rejects it if any structural invariant fails.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_actions: usize,
        rewards: Vec<f64>,
        transitions: Vec<f64>,
        gamma: f64,
        rho: Vec<f64>,
        r_min: f64,
        r_max: f64,
        terminal_states: Vec<usize>,
    ) -> Result<Self> {
        let mdp = Mdp {
            schema_version: MDP_SCHEMA_VERSION,
            n_states,
            n_actions,
            rewards,
            transitions,
            gamma,
            rho,
            r_min,
            r_max,
            terminal_states,
        };
        let violations = validate_mdp(&mdp);
        if violations.is_empty() {
            Ok(mdp)
        } else {
            let joined: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            Err(Error::InvalidModel(joined.join("; ")))
        }
    }

    /// Largest reward magnitude, used for the truncation cap.
    pub fn r_abs_max(&self) -> f64 {
        self.r_min.abs().max(self.r_max.abs())
    }

    /// Truncation bound `R_max / (1 - gamma)`.
    pub fn cap(&self) -> f64 {
        self.r_abs_max() / (1.0 - self.gamma)
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal_states.contains(&s)
    }

    pub fn to_model(&self) -> Model {
        Model {
            n_states: self.n_states,
            n_actions: self.n_actions,
            rewards: self.rewards.clone(),
            transitions: self.transitions.clone(),
        }
    }

    /// Same dynamics with the given reward table and recomputed bounds.
    pub fn with_rewards(&self, rewards: Vec<f64>) -> Mdp {
        let (lo, hi) = reward_bounds(&rewards);
        Mdp {
            rewards,
            r_min: lo.min(self.r_min),
            r_max: hi.max(self.r_max),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mdp serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mdp: Mdp = serde_json::from_str(text).map_err(|e| Error::InvalidModel(e.to_string()))?;
        if mdp.schema_version != MDP_SCHEMA_VERSION {
            return Err(Error::InvalidModel(format!(
                "unsupported schema_version {}",
                mdp.schema_version
            )));
        }
        Ok(mdp)
    }

    /// Samples the initial state from `rho`.
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.rho, rng)
    }

    /// Samples `s' ~ P(. | s, a)`.
    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        sample_categorical(self.transition_row(s, a), rng)
    }
}

/// Returns `(min, max)` over the table, both widened to include zero so the
/// absorbing terminal reward is always inside the bounds.
pub fn reward_bounds(rewards: &[f64]) -> (f64, f64) {
    rewards
        .iter()
        .fold((0.0f64, 0.0f64), |(lo, hi), &r| (lo.min(r), hi.max(r)))
}

/// Inverse-CDF draw from a probability vector. Consumes exactly one `f64`.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// One structural defect found by [`validate_mdp`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn violation(field: impl Into<String>, message: impl Into<String>) -> Violation {
    Violation {
        field: field.into(),
        message: message.into(),
    }
}

/// Lists every broken invariant of `mdp`. An empty list means the model is
/// well formed.
pub fn validate_mdp(mdp: &Mdp) -> Vec<Violation> {
    let mut out = Vec::new();
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    if ns == 0 {
        out.push(violation("n_states", "must be positive"));
    }
    if na == 0 {
        out.push(violation("n_actions", "must be positive"));
    }
    if !(mdp.gamma >= 0.0 && mdp.gamma < 1.0) {
        out.push(violation("gamma", format!("gamma must be < 1 and >= 0, got {}", mdp.gamma)));
    }
    if mdp.rewards.len() != ns * na {
        out.push(violation(
            "rewards",
            format!("expected {} entries, got {}", ns * na, mdp.rewards.len()),
        ));
    }
    if mdp.transitions.len() != ns * na * ns {
        out.push(violation(
            "transitions",
            format!("expected {} entries, got {}", ns * na * ns, mdp.transitions.len()),
        ));
    }
    if mdp.rho.len() != ns {
        out.push(violation("rho", format!("expected {} entries, got {}", ns, mdp.rho.len())));
    }
    if !out.is_empty() {
        return out;
    }

    if !(mdp.r_min <= mdp.r_max) {
        out.push(violation("r_min", format!("r_min {} exceeds r_max {}", mdp.r_min, mdp.r_max)));
    }
    for s in 0..ns {
        for a in 0..na {
            let r = mdp.reward(s, a);
            if !r.is_finite() || r < mdp.r_min || r > mdp.r_max {
                out.push(violation(
                    format!("rewards[{s},{a}]"),
                    format!("reward {r} outside [{}, {}]", mdp.r_min, mdp.r_max),
                ));
            }
            let row = mdp.transition_row(s, a);
            if let Some((i, p)) = row.iter().enumerate().find(|(_, p)| !(**p >= 0.0)) {
                out.push(violation(
                    format!("transitions[{s},{a}]"),
                    format!("entry {i} is {p}, must be non-negative"),
                ));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                out.push(violation(
                    format!("transitions[{s},{a}]"),
                    format!("row sums to {sum}"),
                ));
            }
        }
    }
    if let Some((i, p)) = mdp.rho.iter().enumerate().find(|(_, p)| !(**p >= 0.0)) {
        out.push(violation("rho", format!("entry {i} is {p}, must be non-negative")));
    }
    let rho_sum: f64 = mdp.rho.iter().sum();
    if (rho_sum - 1.0).abs() > ROW_SUM_TOL {
        out.push(violation("rho", format!("sums to {rho_sum}")));
    }
    for &t in &mdp.terminal_states {
        if t >= ns {
            out.push(violation("terminal_states", format!("state {t} out of range")));
            continue;
        }
        for a in 0..na {
            let row = mdp.transition_row(t, a);
            if (row[t] - 1.0).abs() > ROW_SUM_TOL || mdp.reward(t, a) != 0.0 {
                out.push(violation(
                    format!("terminal_states[{t}]"),
                    format!("action {a} must self-loop with reward 0"),
                ));
            }
        }
    }
    out
}

/// One observed step `<s, a, r, s'>`. `done` marks arrival in a terminal
/// state; time-limit truncation is not recorded here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub done: bool,
}

/// A transition multiset together with its maximum-likelihood model.
///
/// Unvisited pairs get a zero reward and a uniform next-state row so the
/// empirical kernel stays stochastic.
#[derive(Debug, Clone)]
pub struct EmpiricalDataset {
    n_states: usize,
    n_actions: usize,
    transitions: Vec<Transition>,
    counts: Vec<u64>,
    reward_sums: Vec<f64>,
    next_counts: Vec<u64>,
    r_d: Vec<f64>,
    p_d: Vec<f64>,
}

impl EmpiricalDataset {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        let pairs = n_states * n_actions;
        let uniform = if n_states > 0 { 1.0 / n_states as f64 } else { 0.0 };
        EmpiricalDataset {
            n_states,
            n_actions,
            transitions: Vec::new(),
            counts: vec![0; pairs],
            reward_sums: vec![0.0; pairs],
            next_counts: vec![0; pairs * n_states],
            r_d: vec![0.0; pairs],
            p_d: vec![uniform; pairs * n_states],
        }
    }

    fn check(&self, index: usize, t: &Transition) -> Result<()> {
        if t.s >= self.n_states || t.s_next >= self.n_states {
            return Err(Error::Input {
                index,
                message: format!(
                    "state id out of range (s={}, s_next={}, n_states={})",
                    t.s, t.s_next, self.n_states
                ),
            });
        }
        if t.a >= self.n_actions {
            return Err(Error::Input {
                index,
                message: format!("action id {} out of range (n_actions={})", t.a, self.n_actions),
            });
        }
        if !t.r.is_finite() {
            return Err(Error::Input {
                index,
                message: format!("reward {} is not finite", t.r),
            });
        }
        Ok(())
    }

    /// Appends one transition and refreshes the estimates at its pair.
    pub fn push(&mut self, t: Transition) -> Result<()> {
        self.check(self.transitions.len(), &t)?;
        let z = t.s * self.n_actions + t.a;
        self.counts[z] += 1;
        self.reward_sums[z] += t.r;
        self.next_counts[z * self.n_states + t.s_next] += 1;
        let n = self.counts[z] as f64;
        self.r_d[z] = self.reward_sums[z] / n;
        let base = z * self.n_states;
        for sp in 0..self.n_states {
            self.p_d[base + sp] = self.next_counts[base + sp] as f64 / n;
        }
        self.transitions.push(t);
        Ok(())
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn count(&self, s: usize, a: usize) -> u64 {
        self.counts[s * self.n_actions + a]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn empirical_rewards(&self) -> &[f64] {
        &self.r_d
    }

    pub fn empirical_transitions(&self) -> &[f64] {
        &self.p_d
    }

    /// Empirical policy: action frequencies per state, uniform where the
    /// state was never visited.
    pub fn empirical_policy(&self) -> Policy {
        let na = self.n_actions;
        let mut probs = vec![0.0; self.n_states * na];
        for s in 0..self.n_states {
            let row = &self.counts[s * na..(s + 1) * na];
            let total: u64 = row.iter().sum();
            for a in 0..na {
                probs[s * na + a] = if total == 0 {
                    1.0 / na as f64
                } else {
                    row[a] as f64 / total as f64
                };
            }
        }
        Policy::stochastic(self.n_states, na, probs).expect("empirical policy rows are normalized")
    }

    pub fn to_model(&self) -> Model {
        Model {
            n_states: self.n_states,
            n_actions: self.n_actions,
            rewards: self.r_d.clone(),
            transitions: self.p_d.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let doc = DatasetDocument {
            schema_version: DATASET_SCHEMA_VERSION,
            n_states: self.n_states,
            n_actions: self.n_actions,
            transitions: self.transitions.clone(),
        };
        serde_json::to_string(&doc).expect("dataset serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DatasetDocument =
            serde_json::from_str(text).map_err(|e| Error::InvalidModel(e.to_string()))?;
        if doc.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::InvalidModel(format!(
                "unsupported schema_version {}",
                doc.schema_version
            )));
        }
        make_empirical_mdp(&doc.transitions, doc.n_states, doc.n_actions)
    }
}

impl TabularModel for EmpiricalDataset {
    fn n_states(&self) -> usize {
        self.n_states
    }
    fn n_actions(&self) -> usize {
        self.n_actions
    }
    fn reward(&self, s: usize, a: usize) -> f64 {
        self.r_d[s * self.n_actions + a]
    }
    fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let z = s * self.n_actions + a;
        &self.p_d[z * self.n_states..(z + 1) * self.n_states]
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetDocument {
    schema_version: u32,
    n_states: usize,
    n_actions: usize,
    transitions: Vec<Transition>,
}

/// Builds the empirical model of a transition multiset.
pub fn make_empirical_mdp(
    transitions: &[Transition],
    n_states: usize,
    n_actions: usize,
) -> Result<EmpiricalDataset> {
    let mut dataset = EmpiricalDataset::new(n_states, n_actions);
    for t in transitions {
        dataset.push(*t)?;
    }
    Ok(dataset)
}

/// Action probabilities per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
    pub deterministic: bool,
}

impl Policy {
    /// One-hot policy from a per-state action choice.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let n_states = actions.len();
        let mut probs = vec![0.0; n_states * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            assert!(a < n_actions, "action {a} out of range");
            probs[s * n_actions + a] = 1.0;
        }
        Policy {
            n_states,
            n_actions,
            probs,
            deterministic: true,
        }
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Policy {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
            deterministic: n_actions == 1,
        }
    }

    pub fn stochastic(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::InvalidModel(format!(
                "policy needs {} entries, got {}",
                n_states * n_actions,
                probs.len()
            )));
        }
        let mut one_hot = true;
        for s in 0..n_states {
            let row = &probs[s * n_actions..(s + 1) * n_actions];
            if row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::InvalidModel(format!("policy row {s} has a negative entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidModel(format!("policy row {s} sums to {sum}")));
            }
            one_hot &= row.iter().all(|&p| p == 0.0 || p == 1.0);
        }
        Ok(Policy {
            n_states,
            n_actions,
            probs,
            deterministic: one_hot,
        })
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Most probable action at `s`, lowest index on ties.
    pub fn mode(&self, s: usize) -> usize {
        argmax_lowest(self.row(s))
    }

    pub fn modes(&self) -> Vec<usize> {
        (0..self.n_states).map(|s| self.mode(s)).collect()
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Random dense MDP with rewards in `[0, 1]`, no terminal states and a
/// uniform initial distribution. Used by property tests and experiments.
pub fn random_mdp<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize, gamma: f64) -> Mdp {
    let rewards: Vec<f64> = (0..n_states * n_actions).map(|_| rng.gen::<f64>()).collect();
    let mut transitions = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        let raw: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>() + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        transitions.extend(raw.iter().map(|p| p / total));
    }
    Mdp {
        schema_version: MDP_SCHEMA_VERSION,
        n_states,
        n_actions,
        rewards,
        transitions,
        gamma,
        rho: vec![1.0 / n_states as f64; n_states],
        r_min: 0.0,
        r_max: 1.0,
        terminal_states: Vec::new(),
    }
}

/// Draws `per_pair` transitions from every pair of `mdp` (rewards are the
/// expected rewards, so only the kernel is sampled).
pub fn sample_dataset_per_pair<R: Rng + ?Sized>(mdp: &Mdp, per_pair: usize, rng: &mut R) -> EmpiricalDataset {
    let mut dataset = EmpiricalDataset::new(mdp.n_states, mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            for _ in 0..per_pair {
                let s_next = mdp.sample_next(s, a, rng);
                dataset
                    .push(Transition {
                        s,
                        a,
                        r: mdp.reward(s, a),
                        s_next,
                        done: mdp.is_terminal(s_next),
                    })
                    .expect("ids come from the model");
            }
        }
    }
    dataset
}
