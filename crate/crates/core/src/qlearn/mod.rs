//! Heuristic-guided tabular Q-learning.
//!
//! Guidance arrives as `(state, action, q)` triples. Offline guidance is
//! regressed into the table once before training; online guidance stays in
//! the loss for a window of updates alongside the clamped TD updates.

mod train;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use train::{
    derive_seed, evaluate_greedy, steps_to_fraction, train, EvalPoint, GuidanceMode, GuidancePoll, NoHooks,
    ScheduledGuidance, TrainOptions, TrainOutcome, TrainingHooks, train_seeded, ENV_STREAM, EVAL_STREAM,
};

use crate::error::{Error, Result};
use crate::mdp::Transition;
use crate::oracle::QTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapingMode {
    /// Guidance enters as Q-value regression targets.
    QHeuristic,
    /// Guidance becomes a persistent per-pair reward bonus.
    RewardShaping,
    /// Guidance is ignored.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub alpha: f64,
    pub alpha_g: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Linear decay horizon; `None` means 20% of the training budget.
    pub epsilon_decay_steps: Option<u64>,
    pub guidance_window: u64,
    pub bootstrap_tol: f64,
    pub bootstrap_max_iters: usize,
    pub shaping_mode: ShapingMode,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            alpha: 0.1,
            alpha_g: 0.5,
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: None,
            guidance_window: 100,
            bootstrap_tol: 1e-6,
            bootstrap_max_iters: 10_000,
            shaping_mode: ShapingMode::QHeuristic,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let rate = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in (0, 1], got {v}")))
            }
        };
        rate("alpha", self.alpha)?;
        rate("alpha_g", self.alpha_g)?;
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0, 1), got {}", self.gamma)));
        }
        for (name, e) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {e}")));
            }
        }
        if self.guidance_window < 1 {
            return Err(Error::Config("guidance_window must be >= 1".into()));
        }
        if !(self.bootstrap_tol > 0.0) {
            return Err(Error::Config("bootstrap_tol must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Exploration rate after `step` environment steps.
    pub fn epsilon_at(&self, step: u64, budget: u64) -> f64 {
        let horizon = self.epsilon_decay_steps.unwrap_or(budget / 5).max(1);
        let frac = (step as f64 / horizon as f64).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceSource {
    Llm,
    Human,
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceTriple {
    pub state: usize,
    pub action: usize,
    #[serde(rename = "q")]
    pub q_value: f64,
}

impl GuidanceTriple {
    pub fn new(state: usize, action: usize, q_value: f64) -> Self {
        GuidanceTriple { state, action, q_value }
    }
}

/// A batch of guidance triples and its bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSet {
    #[serde(default)]
    pub id: u64,
    pub triples: Vec<GuidanceTriple>,
    pub source: GuidanceSource,
    #[serde(default)]
    pub received_at_step: u64,
    #[serde(default)]
    pub remaining_window: u64,
}

impl GuidanceSet {
    pub fn new(source: GuidanceSource, triples: Vec<GuidanceTriple>) -> Self {
        GuidanceSet {
            id: 0,
            triples,
            source,
            received_at_step: 0,
            remaining_window: 0,
        }
    }

    pub fn empty(source: GuidanceSource) -> Self {
        GuidanceSet::new(source, Vec::new())
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn is_active(&self) -> bool {
        self.remaining_window > 0 && !self.triples.is_empty()
    }
}

/// One clamped TD step with additive heuristic `h`:
/// `q(s,a) += alpha * (clamp(r + gamma * max q(s', .) + h) - q(s,a))`.
pub fn td_update(q: &mut QTable, t: &Transition, h: f64, cfg: &LearnerConfig) {
    let bootstrap = if t.done { 0.0 } else { cfg.gamma * q.max_value(t.s_next) };
    let target = q.clamp(t.r + bootstrap + h);
    let current = q.get(t.s, t.a);
    q.set(t.s, t.a, current + cfg.alpha * (target - current));
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub iterations: usize,
    pub converged: bool,
    /// Largest `|mean target - q|` over guided cells at exit.
    pub max_residual: f64,
    pub cells: usize,
}

/// Per-cell regression targets: the mean of all triples at that cell
/// (clamped to the cap), which is the minimizer of the squared loss.
fn regression_targets<'a>(q: &QTable, sets: impl IntoIterator<Item = &'a GuidanceSet>) -> BTreeMap<(usize, usize), f64> {
    let mut per_set: Vec<BTreeMap<(usize, usize), (f64, usize)>> = Vec::new();
    for set in sets {
        let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
        for t in &set.triples {
            if t.state >= q.n_states() || t.action >= q.n_actions() || !t.q_value.is_finite() {
                continue;
            }
            let e = acc.entry((t.state, t.action)).or_insert((0.0, 0));
            e.0 += t.q_value;
            e.1 += 1;
        }
        per_set.push(acc);
    }
    // Later sets override earlier ones cell by cell.
    let mut targets = BTreeMap::new();
    for acc in per_set {
        for (cell, (sum, n)) in acc {
            targets.insert(cell, q.clamp(sum / n as f64));
        }
    }
    targets
}

fn regress(q: &mut QTable, targets: &BTreeMap<(usize, usize), f64>, cfg: &LearnerConfig) -> RegressionReport {
    let residual = |q: &QTable| {
        targets
            .iter()
            .fold(0.0f64, |m, (&(s, a), &v)| m.max((v - q.get(s, a)).abs()))
    };
    let mut max_residual = residual(q);
    let mut iterations = 0;
    while max_residual > cfg.bootstrap_tol && iterations < cfg.bootstrap_max_iters {
        for (&(s, a), &v) in targets {
            let cur = q.get(s, a);
            q.set(s, a, cur + cfg.alpha_g * (v - cur));
        }
        iterations += 1;
        max_residual = residual(q);
    }
    RegressionReport {
        iterations,
        converged: max_residual <= cfg.bootstrap_tol,
        max_residual,
        cells: targets.len(),
    }
}

/// Regresses the guided cells toward their targets with rate `alpha_g`
/// until within `bootstrap_tol` or `bootstrap_max_iters` passes. Duplicate
/// triples at one cell pull it to their mean. Other cells are untouched.
pub fn bootstrap(q: &mut QTable, dg: &GuidanceSet, cfg: &LearnerConfig) -> RegressionReport {
    let targets = regression_targets(q, [dg]);
    regress(q, &targets, cfg)
}

/// TD updates (h = 0) over `batch`, then one guidance regression pass over
/// every active set. Each active set's window is decremented.
pub fn online_update(
    q: &mut QTable,
    batch: &[Transition],
    guidance: &mut [GuidanceSet],
    cfg: &LearnerConfig,
) -> Option<RegressionReport> {
    for t in batch {
        td_update(q, t, 0.0, cfg);
    }
    let active: Vec<&GuidanceSet> = guidance.iter().filter(|g| g.is_active()).collect();
    if active.is_empty() {
        return None;
    }
    let targets = regression_targets(q, active);
    let report = regress(q, &targets, cfg);
    for g in guidance.iter_mut().filter(|g| g.is_active()) {
        g.remaining_window -= 1;
    }
    Some(report)
}

/// Epsilon-greedy choice. Always draws one uniform `f64`; draws an action
/// index only when exploring.
pub fn greedy_action<R: Rng + ?Sized>(q: &QTable, s: usize, epsilon: f64, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    if u < epsilon {
        rng.gen_range(0..q.n_actions())
    } else {
        q.argmax(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> LearnerConfig {
        LearnerConfig {
            gamma: 0.99,
            ..LearnerConfig::default()
        }
    }

    #[test]
    fn terminal_backup_with_full_rate() {
        let mut q = QTable::zeros(2, 2, 100.0);
        let c = LearnerConfig { alpha: 1.0, ..cfg() };
        td_update(&mut q, &Transition { s: 0, a: 1, r: 1.0, s_next: 1, done: true }, 0.0, &c);
        assert_eq!(q.get(0, 1), 1.0);
    }

    #[test]
    fn target_clamps_at_cap() {
        // R_max = 1, gamma = 0.99 => cap 100; bootstrap max 200 is pre-clamped
        // by the table, so feed it through h instead.
        let mut q = QTable::from_values(2, 1, 100.0, vec![0.0, 100.0]);
        let c = LearnerConfig { alpha: 1.0, ..cfg() };
        td_update(&mut q, &Transition { s: 0, a: 0, r: 1.0, s_next: 1, done: false }, 100.0, &c);
        assert_eq!(q.get(0, 0), 100.0);
    }

    #[test]
    fn bootstrap_single_target() {
        let mut q = QTable::zeros(2, 2, 100.0);
        let dg = GuidanceSet::new(GuidanceSource::Scripted, vec![GuidanceTriple::new(0, 1, 50.0)]);
        let c = cfg();
        let rep = bootstrap(&mut q, &dg, &c);
        assert!(rep.converged);
        assert!((q.get(0, 1) - 50.0).abs() <= c.bootstrap_tol);
        assert_eq!(q.get(0, 0), 0.0);
        assert_eq!(q.get(1, 0), 0.0);
        assert_eq!(q.get(1, 1), 0.0);
    }

    #[test]
    fn bootstrap_empty_is_identity() {
        let mut q = QTable::from_values(2, 2, 10.0, vec![1.0, 2.0, 3.0, 4.0]);
        let before = q.clone();
        let rep = bootstrap(&mut q, &GuidanceSet::empty(GuidanceSource::Llm), &cfg());
        assert_eq!(q, before);
        assert_eq!(rep.iterations, 0);
    }

    #[test]
    fn conflicting_duplicates_settle_at_mean() {
        // Oracle: simulate the averaged squared-loss gradient step directly.
        let alpha_g = 0.5;
        let mut sim = 0.0f64;
        for _ in 0..200 {
            let grad = ((10.0 - sim) + (20.0 - sim)) / 2.0;
            sim += alpha_g * grad;
        }
        let mut q = QTable::zeros(1, 1, 100.0);
        let dg = GuidanceSet::new(
            GuidanceSource::Llm,
            vec![GuidanceTriple::new(0, 0, 10.0), GuidanceTriple::new(0, 0, 20.0)],
        );
        let c = cfg();
        bootstrap(&mut q, &dg, &c);
        assert!((q.get(0, 0) - sim).abs() <= c.bootstrap_tol);
        assert!((q.get(0, 0) - 15.0).abs() <= c.bootstrap_tol);
    }

    #[test]
    fn online_update_without_guidance_is_plain_td() {
        let c = cfg();
        let batch = [
            Transition { s: 0, a: 0, r: 0.5, s_next: 1, done: false },
            Transition { s: 1, a: 1, r: 1.0, s_next: 0, done: true },
        ];
        let mut a = QTable::zeros(2, 2, 100.0);
        let mut b = a.clone();
        online_update(&mut a, &batch, &mut [], &c);
        for t in &batch {
            td_update(&mut b, t, 0.0, &c);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn cap_guidance_takes_argmax() {
        let c = cfg();
        let mut q = QTable::from_values(2, 2, 100.0, vec![3.0, -1.0, 0.0, 0.0]);
        let mut dg = GuidanceSet::new(GuidanceSource::Human, vec![GuidanceTriple::new(0, 1, 100.0)]);
        dg.remaining_window = 100;
        let batch = [Transition { s: 0, a: 0, r: 1.0, s_next: 1, done: false }];
        online_update(&mut q, &batch, std::slice::from_mut(&mut dg), &c);
        assert_eq!(q.argmax(0), 1);
        assert_eq!(dg.remaining_window, 99);
    }

    #[test]
    fn exhausted_window_skips_guidance() {
        let c = cfg();
        let mut q = QTable::zeros(2, 2, 100.0);
        let mut dg = GuidanceSet::new(GuidanceSource::Human, vec![GuidanceTriple::new(0, 1, 100.0)]);
        dg.remaining_window = 0;
        assert!(online_update(&mut q, &[], std::slice::from_mut(&mut dg), &c).is_none());
        assert_eq!(q.get(0, 1), 0.0);
    }

    #[test]
    fn greedy_picks_max_and_breaks_ties_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = QTable::from_values(2, 2, 10.0, vec![0.5, 0.9, 0.7, 0.7]);
        assert_eq!(greedy_action(&q, 0, 0.0, &mut rng), 1);
        assert_eq!(greedy_action(&q, 1, 0.0, &mut rng), 0);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let q = QTable::zeros(1, 4, 1.0);
        let mut hist = [0usize; 4];
        for _ in 0..10_000 {
            hist[greedy_action(&q, 0, 1.0, &mut rng)] += 1;
        }
        for h in hist {
            assert!((h as f64 / 10_000.0 - 0.25).abs() <= 0.02, "{hist:?}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(LearnerConfig::default().validate().is_ok());
        assert!(LearnerConfig { alpha: 0.0, ..LearnerConfig::default() }.validate().is_err());
        assert!(LearnerConfig { guidance_window: 0, ..LearnerConfig::default() }.validate().is_err());
        assert!(LearnerConfig { epsilon_end: 1.5, ..LearnerConfig::default() }.validate().is_err());
    }

    #[test]
    fn epsilon_schedule_is_linear() {
        let c = LearnerConfig::default();
        assert_eq!(c.epsilon_at(0, 1000), 1.0);
        assert!((c.epsilon_at(100, 1000) - 0.525).abs() < 1e-12);
        assert!((c.epsilon_at(200, 1000) - 0.05).abs() < 1e-12);
        assert!((c.epsilon_at(900, 1000) - 0.05).abs() < 1e-12);
    }
}
