//! Numerical checks of the guided learner's guarantees, and the experiment
//! drivers that produce evaluation curves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{slippery_chain, BuiltEnv, CHAIN_FORWARD};
use crate::error::{Error, Result};
use crate::mdp::{random_mdp, sample_dataset_per_pair, EmpiricalDataset, Mdp, Policy, TabularModel};
use crate::oracle::{
    bellman_optimal_apply, discounted_visitation, policy_evaluation, value_iteration, value_iteration_from, QTable,
};
use crate::qlearn::{
    derive_seed, evaluate_greedy, train_seeded, GuidanceSet, LearnerConfig, NoHooks, ScheduledGuidance, ShapingMode,
    TrainOptions, TrainOutcome, EVAL_STREAM,
};

const ORACLE_TOL: f64 = 1e-12;

/// `max |r| / (1 - gamma)` for any tabular model.
pub fn model_cap<M: TabularModel + ?Sized>(model: &M, gamma: f64) -> f64 {
    let mut r_max: f64 = 0.0;
    for s in 0..model.n_states() {
        for a in 0..model.n_actions() {
            r_max = r_max.max(model.reward(s, a).abs());
        }
    }
    r_max / (1.0 - gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuboptimalityReport {
    pub state: usize,
    /// `q*(s, a*) - q^{pi*_D}(s, a^{pi*_D})` on the true model.
    pub lhs: f64,
    /// `q*(s, a*) - qhat*_D(s, a*)`.
    pub term_a1: f64,
    /// `qhat*_D(s, a*) - q^pi_D(s, a^pi)` for the probe policy.
    pub term_a2: f64,
    /// Largest `q^pi_D(s, a^pi) - q^pi(s, a^pi)` over the probe and `pi*_D`.
    pub term_b: f64,
    pub probe_policy: String,
    /// `max |q_hat - qhat*_D|` of the supplied learner table.
    pub learner_gap: f64,
}

impl SuboptimalityReport {
    pub fn slack(&self) -> f64 {
        self.term_a1 + self.term_a2 + self.term_b - self.lhs
    }
}

/// Decomposes the suboptimality of the empirical model's greedy policy at
/// `s` into model error (A1), probe-policy error (A2) and evaluation shift
/// (B).
///
/// The supremum defining B is replaced by a maximum over a witness set that
/// always includes `pi*_D`, so `lhs <= A1 + A2 + B` holds exactly for every
/// probe.
pub fn suboptimality_terms(
    true_mdp: &Mdp,
    dataset: &EmpiricalDataset,
    q_hat: &QTable,
    probe_pi: &Policy,
    probe_id: &str,
    s: usize,
) -> Result<SuboptimalityReport> {
    let gamma = true_mdp.gamma;
    let cap = true_mdp.cap().max(model_cap(dataset, gamma));
    let q_star = value_iteration(true_mdp, gamma, cap, ORACLE_TOL).q;
    let q_star_d = value_iteration(dataset, gamma, cap, ORACLE_TOL).q;
    let pi_star_d = q_star_d.greedy_policy();

    let a_star = q_star.argmax(s);
    let a_d = pi_star_d.mode(s);
    let q_pi_d_true = policy_evaluation(true_mdp, gamma, &pi_star_d, cap)?;
    let lhs = q_star.get(s, a_star) - q_pi_d_true.get(s, a_d);
    let term_a1 = q_star.get(s, a_star) - q_star_d.get(s, a_star);

    let a_pi = probe_pi.mode(s);
    let q_probe_d = policy_evaluation(dataset, gamma, probe_pi, cap)?;
    let q_probe_true = policy_evaluation(true_mdp, gamma, probe_pi, cap)?;
    let term_a2 = q_star_d.get(s, a_star) - q_probe_d.get(s, a_pi);

    let q_pi_d_d = policy_evaluation(dataset, gamma, &pi_star_d, cap)?;
    let shift_probe = q_probe_d.get(s, a_pi) - q_probe_true.get(s, a_pi);
    let shift_witness = q_pi_d_d.get(s, a_d) - q_pi_d_true.get(s, a_d);
    Ok(SuboptimalityReport {
        state: s,
        lhs,
        term_a1,
        term_a2,
        term_b: shift_probe.max(shift_witness),
        probe_policy: probe_id.to_string(),
        learner_gap: q_hat.sup_distance(&q_star_d),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub models: usize,
    pub probes_per_model: usize,
    /// (model, probe) pairs where the inequality held at every state.
    pub held: usize,
    pub min_slack: f64,
}

/// Checks `lhs <= A1 + A2 + B` on `models` random MDPs (2..=8 states,
/// 2..=4 actions, about one pair in five left unsampled) against
/// `probes` random stochastic probe policies each, at every state.
pub fn decomposition_suite(seed: u64, models: usize, probes: usize, gamma: f64) -> Result<DecompositionReport> {
    let per_model: Vec<(usize, f64)> = (0..models as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i));
            let ns = rng.gen_range(2..=8);
            let na = rng.gen_range(2..=4);
            let mdp = random_mdp(&mut rng, ns, na, gamma);
            let mut dataset = EmpiricalDataset::new(ns, na);
            for s in 0..ns {
                for a in 0..na {
                    let n = if rng.gen_bool(0.2) { 0 } else { rng.gen_range(1..6) };
                    for _ in 0..n {
                        let s_next = mdp.sample_next(s, a, &mut rng);
                        dataset.push(crate::mdp::Transition {
                            s,
                            a,
                            r: mdp.rewards[s * na + a],
                            s_next,
                            done: false,
                        })?;
                    }
                }
            }
            let q_hat = QTable::zeros(ns, na, mdp.cap());
            let (mut held, mut min_slack) = (0, f64::INFINITY);
            for _ in 0..probes {
                let raw: Vec<f64> = (0..ns * na).map(|_| rng.gen_range(0.0..1.0)).collect();
                let probs = raw
                    .chunks(na)
                    .flat_map(|row| {
                        let t: f64 = row.iter().sum();
                        row.iter().map(move |x| x / t).collect::<Vec<_>>()
                    })
                    .collect();
                let probe = Policy::stochastic(ns, na, probs)?;
                let mut ok = true;
                for s in 0..ns {
                    let slack = suboptimality_terms(&mdp, &dataset, &q_hat, &probe, "random", s)?.slack();
                    min_slack = min_slack.min(slack);
                    ok &= slack >= -1e-9;
                }
                held += ok as usize;
            }
            Ok((held, min_slack))
        })
        .collect::<Result<_>>()?;
    Ok(DecompositionReport {
        models,
        probes_per_model: probes,
        held: per_model.iter().map(|p| p.0).sum(),
        min_slack: per_model.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceBound {
    /// `+inf` when a visited pair has no samples.
    pub value: f64,
    pub offending_pair: Option<(usize, usize)>,
}

/// Concentration bound on `|q*_D - q*|` at `(s, mu(s))`:
/// `sqrt(ln(2|S||A|/delta) / 2) * sum_s' nu_D(s'|s) / sqrt(n(s', mu(s')))`.
pub fn convergence_bound(
    dataset: &EmpiricalDataset,
    mu: &Policy,
    gamma: f64,
    delta: f64,
    s: usize,
) -> Result<ConvergenceBound> {
    if !mu.deterministic {
        return Err(Error::Config("convergence_bound needs a deterministic policy".into()));
    }
    if !(delta > 0.0) {
        return Err(Error::Config(format!("delta must be positive, got {delta}")));
    }
    let nu = discounted_visitation(dataset, gamma, mu, s)?;
    let size = dataset.n_pairs() as f64;
    let scale = (0.5 * (2.0 * size / delta).ln()).max(0.0).sqrt();
    let mut sum = 0.0;
    for (sp, &w) in nu.probs.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        let a = mu.mode(sp);
        let n = dataset.count(sp, a);
        if n == 0 {
            return Ok(ConvergenceBound {
                value: f64::INFINITY,
                offending_pair: Some((sp, a)),
            });
        }
        sum += w / (n as f64).sqrt();
    }
    Ok(ConvergenceBound {
        value: scale * sum,
        offending_pair: None,
    })
}

/// Samples per pair for `max_s |q*_D - q*| <= epsilon` with probability
/// `1 - delta`: `ceil(|S|^2 / (2 epsilon^2) * ln(2|S||A|/delta))`, floored
/// at 0.
pub fn sample_complexity(n_states: usize, n_actions: usize, epsilon: f64, delta: f64) -> u64 {
    let ns = n_states as f64;
    let log_term = (2.0 * ns * n_actions as f64 / delta).ln();
    let n = ns * ns / (2.0 * epsilon * epsilon) * log_term;
    if n <= 0.0 {
        0
    } else {
        n.ceil() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimationCase {
    Overestimation,
    UnderNonoptimal,
    UnderOptimalCase1,
    UnderOptimalCase2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationLabels {
    pub n_states: usize,
    pub n_actions: usize,
    /// Row-major; `None` where the estimate is exact.
    pub labels: Vec<Option<EstimationCase>>,
    pub argmax_preserved: Vec<bool>,
}

impl EstimationLabels {
    pub fn get(&self, s: usize, a: usize) -> Option<EstimationCase> {
        self.labels[s * self.n_actions + a]
    }
}

pub fn classify_estimation(q_hat: &QTable, q_star: &QTable) -> Result<EstimationLabels> {
    if q_hat.n_states() != q_star.n_states() || q_hat.n_actions() != q_star.n_actions() {
        return Err(Error::Config("tables differ in shape".into()));
    }
    let (ns, na) = (q_star.n_states(), q_star.n_actions());
    let mut labels = Vec::with_capacity(ns * na);
    let mut argmax_preserved = Vec::with_capacity(ns);
    for s in 0..ns {
        let a_star = q_star.argmax(s);
        let preserved = q_hat.argmax(s) == a_star;
        argmax_preserved.push(preserved);
        for a in 0..na {
            let (est, truth) = (q_hat.get(s, a), q_star.get(s, a));
            labels.push(if est > truth {
                Some(EstimationCase::Overestimation)
            } else if est == truth {
                None
            } else if a != a_star {
                Some(EstimationCase::UnderNonoptimal)
            } else if preserved {
                Some(EstimationCase::UnderOptimalCase1)
            } else {
                Some(EstimationCase::UnderOptimalCase2)
            });
        }
    }
    Ok(EstimationLabels {
        n_states: ns,
        n_actions: na,
        labels,
        argmax_preserved,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub achieved_gap: f64,
    pub pass: bool,
    pub sweeps: usize,
}

/// Synchronous guided iteration on `model`: for `sweeps_guided` sweeps every
/// guided cell is pinned to its (clamped) guidance value after the Bellman
/// backup, then plain sweeps run until successive iterates differ by at most
/// `sweep_tol`. The result is compared with value iteration from zero.
pub fn equivalence_check<M: TabularModel + ?Sized>(
    model: &M,
    gamma: f64,
    guidance: &GuidanceSet,
    sweeps_guided: usize,
    sweep_tol: f64,
    gap_tol: f64,
) -> Result<EquivalenceReport> {
    if !(sweep_tol > 0.0 && gap_tol > 0.0) {
        return Err(Error::Config("tolerances must be positive".into()));
    }
    let cap = model_cap(model, gamma);
    let mut q = QTable::zeros(model.n_states(), model.n_actions(), cap);
    for _ in 0..sweeps_guided {
        q = bellman_optimal_apply(model, gamma, &q);
        for t in &guidance.triples {
            if t.state < model.n_states() && t.action < model.n_actions() && t.q_value.is_finite() {
                q.set(t.state, t.action, t.q_value);
            }
        }
    }
    let released = value_iteration_from(model, gamma, q, sweep_tol);
    let reference = value_iteration(model, gamma, cap, sweep_tol);
    let achieved_gap = released.q.sup_distance(&reference.q);
    Ok(EquivalenceReport {
        achieved_gap,
        pass: achieved_gap <= gap_tol,
        sweeps: sweeps_guided + released.sweeps,
    })
}

/// Random guidance at `+cap` or `-cap` on a random subset of cells.
pub fn adversarial_guidance<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize, cap: f64) -> GuidanceSet {
    let mut triples = Vec::new();
    for s in 0..n_states {
        for a in 0..n_actions {
            if rng.gen_bool(0.5) {
                let v = if rng.gen_bool(0.5) { cap } else { -cap };
                triples.push(crate::qlearn::GuidanceTriple::new(s, a, v));
            }
        }
    }
    if triples.is_empty() {
        triples.push(crate::qlearn::GuidanceTriple::new(0, 0, cap));
    }
    GuidanceSet::new(crate::qlearn::GuidanceSource::Scripted, triples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub instances: usize,
    pub passed: usize,
    pub worst_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceInstance {
    pub seed: u64,
    pub n_states: usize,
    pub n_actions: usize,
    pub report: EquivalenceReport,
}

/// One random MDP (2..=10 states, 2..=4 actions) drawn from `seed`, with
/// adversarial guidance pinned for `sweeps_guided` sweeps.
pub fn equivalence_instance(seed: u64, gamma: f64, sweeps_guided: usize) -> Result<EquivalenceInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ns = rng.gen_range(2..=10);
    let na = rng.gen_range(2..=4);
    let mdp = random_mdp(&mut rng, ns, na, gamma);
    let guidance = adversarial_guidance(&mut rng, ns, na, mdp.cap());
    let report = equivalence_check(&mdp, gamma, &guidance, sweeps_guided, 1e-10, 1e-8)?;
    Ok(EquivalenceInstance {
        seed,
        n_states: ns,
        n_actions: na,
        report,
    })
}

/// Equivalence on `instances` random MDPs with adversarial guidance.
pub fn theorem1_suite(seed: u64, instances: usize, gamma: f64, sweeps_guided: usize) -> Result<Theorem1Report> {
    let gaps: Vec<f64> = (0..instances as u64)
        .into_par_iter()
        .map(|i| equivalence_instance(derive_seed(seed, i), gamma, sweeps_guided).map(|r| r.report.achieved_gap))
        .collect::<Result<_>>()?;
    Ok(Theorem1Report {
        instances,
        passed: gaps.iter().filter(|&&g| g <= 1e-8).count(),
        worst_gap: gaps.iter().copied().fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Report {
    pub redraws: usize,
    pub delta: f64,
    /// Redraws where the learner gap exceeded the bound at some state.
    pub violations: usize,
    pub violation_rate: f64,
    /// Same count for the empirical-vs-true model gap `|q*_D - q*|`.
    pub model_gap_violations: usize,
    pub mean_learner_gap: f64,
    pub mean_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lemma2Config {
    pub length: usize,
    pub slip: f64,
    pub gamma: f64,
    pub per_pair: usize,
    pub delta: f64,
    pub redraws: usize,
    /// Sweeps with adversarial guidance pinned before release.
    pub sweeps_guided: usize,
    /// Plain sweeps after release at which the learner gap is measured.
    pub sweeps_after: usize,
}

impl Default for Lemma2Config {
    fn default() -> Self {
        Lemma2Config {
            length: 5,
            slip: 0.2,
            gamma: 0.9,
            per_pair: 100,
            delta: 0.1,
            redraws: 500,
            sweeps_guided: 20,
            sweeps_after: 60,
        }
    }
}

/// Redraws datasets from a slippery chain and compares the guided learner's
/// gap `|q*_D - q_hat|` at `(s, mu(s))` with `convergence_bound`, where `mu`
/// always moves forward.
pub fn lemma2_check(seed: u64, cfg: &Lemma2Config) -> Result<Lemma2Report> {
    let mdp = slippery_chain(cfg.length, cfg.slip, cfg.gamma)?;
    let mu = Policy::deterministic(mdp.n_actions, &vec![CHAIN_FORWARD; mdp.n_states]);
    let cap = mdp.cap();
    let q_star = value_iteration(&mdp, cfg.gamma, cap, ORACLE_TOL).q;

    let rows: Vec<(bool, bool, f64, f64)> = (0..cfg.redraws as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i));
            let dataset = sample_dataset_per_pair(&mdp, cfg.per_pair, &mut rng);
            let q_star_d = value_iteration(&dataset, cfg.gamma, cap, ORACLE_TOL).q;
            let guidance = adversarial_guidance(&mut rng, mdp.n_states, mdp.n_actions, cap);
            let mut q = QTable::zeros(mdp.n_states, mdp.n_actions, cap);
            for _ in 0..cfg.sweeps_guided {
                q = bellman_optimal_apply(&dataset, cfg.gamma, &q);
                for t in &guidance.triples {
                    q.set(t.state, t.action, t.q_value);
                }
            }
            for _ in 0..cfg.sweeps_after {
                q = bellman_optimal_apply(&dataset, cfg.gamma, &q);
            }
            let (mut violated, mut model_violated) = (false, false);
            let (mut gap_sum, mut bound_sum) = (0.0, 0.0);
            for s in 0..mdp.n_states {
                let a = mu.mode(s);
                let bound = convergence_bound(&dataset, &mu, cfg.gamma, cfg.delta, s)?.value;
                let gap = (q_star_d.get(s, a) - q.get(s, a)).abs();
                violated |= gap > bound;
                model_violated |= (q_star_d.get(s, a) - q_star.get(s, a)).abs() > bound;
                gap_sum += gap;
                bound_sum += bound;
            }
            let n = mdp.n_states as f64;
            Ok((violated, model_violated, gap_sum / n, bound_sum / n))
        })
        .collect::<Result<_>>()?;
    let violations = rows.iter().filter(|r| r.0).count();
    let n = cfg.redraws.max(1) as f64;
    Ok(Lemma2Report {
        redraws: cfg.redraws,
        delta: cfg.delta,
        violations,
        violation_rate: violations as f64 / n,
        model_gap_violations: rows.iter().filter(|r| r.1).count(),
        mean_learner_gap: rows.iter().map(|r| r.2).sum::<f64>() / n,
        mean_bound: rows.iter().map(|r| r.3).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub n_states: usize,
    pub n_actions: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub gamma: f64,
    pub samples_per_pair: u64,
    pub trials: usize,
    pub within_epsilon: usize,
    pub worst_error: f64,
}

/// Draws `sample_complexity(..)` samples per pair from random MDPs and
/// checks `max_s |q*_D(s, mu(s)) - q*(s, mu(s))| <= epsilon` with `mu` the
/// true optimal policy.
pub fn theorem2_check(
    seed: u64,
    n_states: usize,
    n_actions: usize,
    epsilon: f64,
    delta: f64,
    gamma: f64,
    trials: usize,
) -> Result<Theorem2Report> {
    let n = sample_complexity(n_states, n_actions, epsilon, delta);
    let errors: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i));
            let mdp = random_mdp(&mut rng, n_states, n_actions, gamma);
            let cap = mdp.cap();
            let q_star = value_iteration(&mdp, gamma, cap, ORACLE_TOL).q;
            let dataset = sample_dataset_per_pair(&mdp, n as usize, &mut rng);
            let q_star_d = value_iteration(&dataset, gamma, cap, ORACLE_TOL).q;
            (0..n_states)
                .map(|s| {
                    let a = q_star.argmax(s);
                    (q_star_d.get(s, a) - q_star.get(s, a)).abs()
                })
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(Theorem2Report {
        n_states,
        n_actions,
        epsilon,
        delta,
        gamma,
        samples_per_pair: n,
        trials,
        within_epsilon: errors.iter().filter(|&&e| e <= epsilon).count(),
        worst_error: errors.iter().copied().fold(0.0, f64::max),
    })
}

/// Return of the optimal policy under the same evaluation protocol as
/// training (greedy rollouts from the first evaluation generator).
pub fn optimal_return(env: &BuiltEnv, seed: u64, episodes: usize) -> f64 {
    let mdp = &env.mdp;
    let q = value_iteration(mdp.as_ref(), mdp.gamma, mdp.cap(), ORACLE_TOL).q;
    evaluate_greedy(mdp, &q, env.max_episode_steps, episodes, derive_seed(seed, EVAL_STREAM)).0
}

/// First evaluation step whose return reaches `threshold`.
pub fn steps_to_threshold(evals: &[(u64, f64)], threshold: f64) -> Option<u64> {
    evals.iter().find(|e| e.1 >= threshold).map(|e| e.0)
}

/// `fraction` of `target`, measured from below for negative targets.
pub fn fraction_of(target: f64, fraction: f64) -> f64 {
    target - (1.0 - fraction) * target.abs()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub seed: u64,
    /// `None` when the threshold was never reached within the budget.
    pub guided_steps: Option<u64>,
    pub unguided_steps: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub optimal_return: f64,
    pub threshold: f64,
    pub rows: Vec<EfficiencyRow>,
    /// Unreached thresholds count as `budget + eval_every`.
    pub guided_median: f64,
    pub unguided_median: f64,
    pub ratio: f64,
    #[serde(skip)]
    pub guided: Vec<TrainOutcome>,
    #[serde(skip)]
    pub unguided: Vec<TrainOutcome>,
}

/// Paired guided/unguided runs over `seeds`; guidance is delivered at step 0
/// under `opts.guidance_mode`.
pub fn efficiency_experiment(
    env: &BuiltEnv,
    cfg: &LearnerConfig,
    opts: &TrainOptions,
    seeds: &[u64],
    guidance: &GuidanceSet,
) -> Result<EfficiencyReport> {
    let optimal = optimal_return(env, 0, opts.eval_episodes);
    let threshold = fraction_of(optimal, 0.8);
    let runs: Vec<(TrainOutcome, TrainOutcome)> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = LearnerConfig { seed, ..cfg.clone() };
            let guided = train_seeded(env, &cfg, opts, &mut ScheduledGuidance::at(0, guidance.clone()))?;
            let unguided = train_seeded(env, &cfg, opts, &mut NoHooks)?;
            Ok((guided, unguided))
        })
        .collect::<Result<_>>()?;
    let censored = (opts.budget + opts.eval_every) as f64;
    let reach = |o: &TrainOutcome| steps_to_threshold(&o.log.evaluations(), threshold);
    let rows: Vec<EfficiencyRow> = seeds
        .iter()
        .zip(&runs)
        .map(|(&seed, (g, u))| EfficiencyRow {
            seed,
            guided_steps: reach(g),
            unguided_steps: reach(u),
        })
        .collect();
    let mut g: Vec<f64> = rows.iter().map(|r| r.guided_steps.map_or(censored, |v| v as f64)).collect();
    let mut u: Vec<f64> = rows.iter().map(|r| r.unguided_steps.map_or(censored, |v| v as f64)).collect();
    let (guided_median, unguided_median) = (median(&mut g), median(&mut u));
    let (guided, unguided) = runs.into_iter().unzip();
    Ok(EfficiencyReport {
        optimal_return: optimal,
        threshold,
        rows,
        guided_median,
        unguided_median,
        ratio: guided_median / unguided_median,
        guided,
        unguided,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionSchedule {
    Start,
    Mid,
    PostConvergence,
    Every10k,
    /// No injection; the treated run equals the control.
    Never,
}

impl InjectionSchedule {
    pub const ALL: [InjectionSchedule; 4] = [
        InjectionSchedule::Start,
        InjectionSchedule::Mid,
        InjectionSchedule::PostConvergence,
        InjectionSchedule::Every10k,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "start" => Ok(InjectionSchedule::Start),
            "mid" => Ok(InjectionSchedule::Mid),
            "post_convergence" => Ok(InjectionSchedule::PostConvergence),
            "every_10k" => Ok(InjectionSchedule::Every10k),
            "never" => Ok(InjectionSchedule::Never),
            other => Err(Error::Config(format!("unknown injection schedule {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InjectionSchedule::Start => "start",
            InjectionSchedule::Mid => "mid",
            InjectionSchedule::PostConvergence => "post_convergence",
            InjectionSchedule::Every10k => "every_10k",
            InjectionSchedule::Never => "never",
        }
    }

    /// Injection steps for a run of `budget` steps given the control's
    /// evaluation series.
    pub fn steps(self, budget: u64, control: &[(u64, f64)]) -> Vec<u64> {
        match self {
            InjectionSchedule::Start => vec![0],
            InjectionSchedule::Mid => vec![budget / 2],
            InjectionSchedule::PostConvergence => {
                vec![crate::qlearn::steps_to_fraction(control, 0.8).unwrap_or(budget / 2)]
            }
            InjectionSchedule::Every10k => (1..).map(|k| k * 10_000).take_while(|&s| s < budget).collect(),
            InjectionSchedule::Never => Vec::new(),
        }
    }
}

/// Whether `treated` is within 5% of `control` (scaled by `|control|`, so
/// negative returns are handled).
pub fn recovered(treated: f64, control: f64) -> bool {
    treated >= fraction_of(control, 0.95)
}

/// First evaluation after `after` from which the treated return stays
/// within 5% of the control's concurrent return for the rest of the run.
pub fn recovery_step(treated: &[(u64, f64)], control: &[(u64, f64)], after: u64) -> Option<u64> {
    let paired: Vec<(u64, bool)> = treated
        .iter()
        .zip(control)
        .filter(|(t, _)| t.0 > after)
        .map(|(t, c)| {
            debug_assert_eq!(t.0, c.0);
            (t.0, recovered(t.1, c.1))
        })
        .collect();
    let mut candidate = None;
    for (step, ok) in paired {
        match (ok, candidate) {
            (true, None) => candidate = Some(step),
            (false, _) => candidate = None,
            _ => {}
        }
    }
    candidate
}

#[derive(Debug, Clone)]
pub struct AdaptabilityResult {
    pub seed: u64,
    pub schedule: InjectionSchedule,
    pub mode: ShapingMode,
    pub injection_steps: Vec<u64>,
    pub recovery_step: Option<u64>,
    pub treated: TrainOutcome,
}

/// Unguided control run for the adaptability experiment.
pub fn adaptability_control(env: &BuiltEnv, cfg: &LearnerConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    train_seeded(env, cfg, opts, &mut NoHooks)
}

/// Injects `guidance` per `schedule` into a run that otherwise matches
/// `control` (same seeds) and measures recovery after the last injection.
pub fn adaptability_treated(
    env: &BuiltEnv,
    cfg: &LearnerConfig,
    opts: &TrainOptions,
    schedule: InjectionSchedule,
    mode: ShapingMode,
    guidance: &GuidanceSet,
    control: &TrainOutcome,
) -> Result<AdaptabilityResult> {
    let control_series = control.log.evaluations();
    let injection_steps = schedule.steps(opts.budget, &control_series);
    let Some(&last) = injection_steps.last() else {
        return Ok(AdaptabilityResult {
            seed: cfg.seed,
            schedule,
            mode,
            injection_steps,
            recovery_step: Some(0),
            treated: control.clone(),
        });
    };
    let treated_cfg = LearnerConfig {
        shaping_mode: mode,
        ..cfg.clone()
    };
    let items = injection_steps.iter().map(|&s| (s, guidance.clone())).collect();
    let treated = train_seeded(env, &treated_cfg, opts, &mut ScheduledGuidance::new(items))?;
    let recovery = recovery_step(&treated.log.evaluations(), &control_series, last);
    Ok(AdaptabilityResult {
        seed: cfg.seed,
        schedule,
        mode,
        injection_steps,
        recovery_step: recovery,
        treated,
    })
}

/// Treated and control runs for one seed.
pub fn adaptability_experiment(
    env: &BuiltEnv,
    cfg: &LearnerConfig,
    opts: &TrainOptions,
    schedule: InjectionSchedule,
    mode: ShapingMode,
    guidance: &GuidanceSet,
) -> Result<(AdaptabilityResult, TrainOutcome)> {
    let control = adaptability_control(env, cfg, opts)?;
    let treated = adaptability_treated(env, cfg, opts, schedule, mode, guidance, &control)?;
    Ok((treated, control))
}
