use std::ops::ControlFlow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bootstrap, greedy_action, online_update, GuidanceSet, LearnerConfig, ShapingMode};
use crate::envs::{BuiltEnv, TabularEnv};
use crate::error::{Error, Result};
use crate::mdp::{EmpiricalDataset, Mdp, Transition};
use crate::oracle::QTable;
use crate::runlog::{EventPayload, RunEvent, RunLog, RunStatus, RunSummary};

/// Stream offset for evaluation generators; evaluation `k` of a run seeded
/// `s` uses `derive_seed(s, EVAL_STREAM + k)`.
pub const EVAL_STREAM: u64 = 1 << 32;

/// Stream for the environment generator of a seeded run.
pub const ENV_STREAM: u64 = 1;

/// SplitMix64 finalizer over `seed` and a stream index.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Guidance due at step 0 is bootstrapped into the table before training.
    /// Anything later is applied online.
    Offline,
    /// Every set stays in the loss for `guidance_window` updates.
    Online,
    /// Guidance is dropped.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub budget: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// 0 disables checkpoints.
    pub checkpoint_every: u64,
    pub guidance_mode: GuidanceMode,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            budget: 10_000,
            eval_every: 1000,
            eval_episodes: 10,
            checkpoint_every: 0,
            guidance_mode: GuidanceMode::Online,
        }
    }
}

#[derive(Debug, Default)]
pub struct GuidancePoll {
    pub sets: Vec<GuidanceSet>,
    /// The sender went away; no more guidance will arrive.
    pub closed: bool,
}

/// Callbacks the training loop makes at step boundaries.
pub trait TrainingHooks {
    /// Guidance that has arrived since the last poll.
    fn poll_guidance(&mut self, _step: u64) -> GuidancePoll {
        GuidancePoll::default()
    }

    /// Called before every step. May block (pause); `Break` stops the run.
    fn at_step_boundary(&mut self, _step: u64, _q: &QTable) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }

    fn on_event(&mut self, _event: &RunEvent) {}

    /// Persist a checkpoint; the returned path is recorded in the log.
    fn on_checkpoint(&mut self, _step: u64, _q: &QTable, _dataset: &EmpiricalDataset) -> Option<String> {
        None
    }
}

pub struct NoHooks;

impl TrainingHooks for NoHooks {}

/// Guidance delivered at fixed steps.
#[derive(Debug, Clone, Default)]
pub struct ScheduledGuidance {
    items: Vec<(u64, GuidanceSet)>,
    next: usize,
}

impl ScheduledGuidance {
    pub fn new(mut items: Vec<(u64, GuidanceSet)>) -> Self {
        items.sort_by_key(|(step, _)| *step);
        for (i, (_, set)) in items.iter_mut().enumerate() {
            if set.id == 0 {
                set.id = i as u64 + 1;
            }
        }
        ScheduledGuidance { items, next: 0 }
    }

    pub fn at(step: u64, set: GuidanceSet) -> Self {
        ScheduledGuidance::new(vec![(step, set)])
    }
}

impl TrainingHooks for ScheduledGuidance {
    fn poll_guidance(&mut self, step: u64) -> GuidancePoll {
        let mut sets = Vec::new();
        while self.next < self.items.len() && self.items[self.next].0 <= step {
            sets.push(self.items[self.next].1.clone());
            self.next += 1;
        }
        GuidancePoll { sets, closed: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub mean_return: f64,
    pub std_return: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: RunLog,
    pub q: QTable,
    pub dataset: EmpiricalDataset,
    pub evaluations: Vec<EvalPoint>,
}

/// Trains on a fresh instance of `env` whose generator is
/// `derive_seed(cfg.seed, ENV_STREAM)`.
pub fn train_seeded(
    env: &BuiltEnv,
    cfg: &LearnerConfig,
    opts: &TrainOptions,
    hooks: &mut dyn TrainingHooks,
) -> Result<TrainOutcome> {
    let mut instance = env.instance(derive_seed(cfg.seed, ENV_STREAM));
    train(&mut instance, cfg, opts, hooks)
}

/// Undiscounted returns of `episodes` greedy (epsilon = 0) rollouts, as
/// `(mean, population std)`. Uses its own generator seeded with `seed`.
pub fn evaluate_greedy(mdp: &std::sync::Arc<Mdp>, q: &QTable, max_steps: usize, episodes: usize, seed: u64) -> (f64, f64) {
    let mut env = TabularEnv::new(std::sync::Arc::clone(mdp), max_steps, seed);
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut s = env.reset();
        let mut total = 0.0;
        loop {
            let out = env.step(q.argmax(s)).expect("episode live");
            total += out.reward;
            s = out.next_state;
            if out.done() {
                break;
            }
        }
        returns.push(total);
    }
    let n = returns.len().max(1) as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// First evaluation step at which the return reaches
/// `first + fraction * (peak - first)`. Works for negative returns too.
pub fn steps_to_fraction(evals: &[(u64, f64)], fraction: f64) -> Option<u64> {
    let first = evals.first()?.1;
    let peak = evals.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
    let threshold = first + fraction * (peak - first);
    evals.iter().find(|e| e.1 >= threshold).map(|e| e.0)
}

struct Logger<'h> {
    log: RunLog,
    hooks: &'h mut dyn TrainingHooks,
}

impl Logger<'_> {
    fn push(&mut self, step: u64, payload: EventPayload) {
        let event = self.log.push(step, payload).clone();
        self.hooks.on_event(&event);
    }
}

/// Runs the guided Q-learning loop for `opts.budget` environment steps.
///
/// Per step: drain guidance, reset if the episode ended, pick an
/// epsilon-greedy action (one uniform draw, plus an index draw when
/// exploring), step the environment, record the transition, draw
/// `batch_size` indices uniformly with replacement from the dataset, then
/// run `online_update`. The learner generator is seeded with `cfg.seed`;
/// the environment brings its own.
pub fn train(
    env: &mut TabularEnv,
    cfg: &LearnerConfig,
    opts: &TrainOptions,
    hooks: &mut dyn TrainingHooks,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if opts.budget == 0 {
        return Err(Error::Config("budget must be > 0".into()));
    }
    if opts.eval_every == 0 || opts.eval_episodes == 0 {
        return Err(Error::Config("eval_every and eval_episodes must be > 0".into()));
    }
    let mdp = env.shared_mdp();
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let cap = mdp.r_abs_max() / (1.0 - cfg.gamma);
    let mut q = QTable::zeros(ns, na, cap);
    let mut dataset = EmpiricalDataset::new(ns, na);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut active: Vec<GuidanceSet> = Vec::new();
    let mut bonus: Option<Vec<f64>> = None;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut evaluations = Vec::new();
    let mut channel_closed = false;
    let mut stopped = false;
    let mut window_transitions = 0u64;
    let mut window_episodes = 0u64;

    let mut logger = Logger {
        log: RunLog::new(format!("seed-{}", cfg.seed)),
        hooks,
    };
    logger.log.status = RunStatus::Running;
    logger.push(0, EventPayload::Status { status: RunStatus::Running, message: None });

    let mut s = 0;
    let mut steps_done = 0u64;
    for step in 0..opts.budget {
        if logger.hooks.at_step_boundary(step, &q).is_break() {
            stopped = true;
            break;
        }
        if !channel_closed {
            let poll = logger.hooks.poll_guidance(step);
            for mut set in poll.sets {
                logger.push(
                    step,
                    EventPayload::GuidanceReceived {
                        guidance_id: set.id,
                        source: set.source,
                        triples: set.triples.len(),
                    },
                );
                apply_guidance(&mut logger, &mut set, step, cfg, opts, &mut q, &mut active, &mut bonus, ns * na);
            }
            if poll.closed {
                channel_closed = true;
                tracing::warn!(step, "guidance channel closed; continuing unguided");
            }
        }

        if env.is_finished() {
            s = env.reset();
        }
        let eps = cfg.epsilon_at(step, opts.budget);
        let a = greedy_action(&q, s, eps, &mut rng);
        let out = env.step(a)?;
        dataset.push(Transition {
            s,
            a,
            r: out.reward,
            s_next: out.next_state,
            done: out.terminal,
        })?;
        s = out.next_state;
        window_transitions += 1;
        if out.done() {
            window_episodes += 1;
        }

        batch.clear();
        let stored = dataset.transitions();
        for _ in 0..cfg.batch_size {
            let mut t = stored[rng.gen_range(0..stored.len())];
            if let Some(b) = &bonus {
                t.r += b[t.s * na + t.a];
            }
            batch.push(t);
        }
        online_update(&mut q, &batch, &mut active, cfg);
        active.retain(|g| g.remaining_window > 0);

        steps_done = step + 1;
        if steps_done % opts.eval_every == 0 {
            logger.push(
                steps_done,
                EventPayload::TransitionBatch {
                    transitions: window_transitions,
                    episodes: window_episodes,
                    dataset_size: dataset.len(),
                },
            );
            window_transitions = 0;
            window_episodes = 0;
            let k = steps_done / opts.eval_every - 1;
            let (mean, std) = evaluate_greedy(
                &mdp,
                &q,
                env.max_episode_steps(),
                opts.eval_episodes,
                derive_seed(cfg.seed, EVAL_STREAM + k),
            );
            evaluations.push(EvalPoint {
                step: steps_done,
                mean_return: mean,
                std_return: std,
            });
            logger.push(
                steps_done,
                EventPayload::Evaluation {
                    mean_return: mean,
                    std_return: std,
                    episodes: opts.eval_episodes,
                },
            );
        }
        if opts.checkpoint_every > 0 && steps_done % opts.checkpoint_every == 0 {
            let path = logger.hooks.on_checkpoint(steps_done, &q, &dataset);
            logger.push(steps_done, EventPayload::Checkpoint { path });
        }
    }

    if window_transitions > 0 {
        logger.push(
            steps_done,
            EventPayload::TransitionBatch {
                transitions: window_transitions,
                episodes: window_episodes,
                dataset_size: dataset.len(),
            },
        );
    }
    let status = if stopped { RunStatus::Stopped } else { RunStatus::Finished };
    let message = channel_closed.then(|| "guidance channel closed mid-run; finished unguided".to_string());
    logger.push(steps_done, EventPayload::Status { status, message });

    let series: Vec<(u64, f64)> = evaluations.iter().map(|e| (e.step, e.mean_return)).collect();
    let mut log = logger.log;
    log.status = status;
    log.summary = Some(RunSummary {
        steps_to_80pct: steps_to_fraction(&series, 0.8),
        peak_return: series.iter().map(|e| e.1).reduce(f64::max),
        final_return: series.last().map(|e| e.1),
        steps: steps_done,
        guidance_channel_closed: channel_closed,
    });
    Ok(TrainOutcome {
        log,
        q,
        dataset,
        evaluations,
    })
}

#[allow(clippy::too_many_arguments)]
fn apply_guidance(
    logger: &mut Logger<'_>,
    set: &mut GuidanceSet,
    step: u64,
    cfg: &LearnerConfig,
    opts: &TrainOptions,
    q: &mut QTable,
    active: &mut Vec<GuidanceSet>,
    bonus: &mut Option<Vec<f64>>,
    n_pairs: usize,
) {
    let drop = |logger: &mut Logger<'_>, reason: &str| {
        logger.push(
            step,
            EventPayload::GuidanceDropped {
                guidance_id: set.id,
                reason: reason.to_string(),
            },
        )
    };
    if opts.guidance_mode == GuidanceMode::None || cfg.shaping_mode == ShapingMode::None {
        return drop(logger, "guidance disabled for this run");
    }
    let n_actions = q.n_actions();
    let in_range: Vec<_> = set
        .triples
        .iter()
        .copied()
        .filter(|t| t.state < q.n_states() && t.action < n_actions && t.q_value.is_finite())
        .collect();
    if in_range.is_empty() {
        return drop(logger, "no usable triples");
    }
    set.triples = in_range;
    set.received_at_step = step;
    let cells = {
        let mut c: Vec<_> = set.triples.iter().map(|t| (t.state, t.action)).collect();
        c.sort_unstable();
        c.dedup();
        c.len()
    };

    if cfg.shaping_mode == ShapingMode::RewardShaping {
        let b = bonus.get_or_insert_with(|| vec![0.0; n_pairs]);
        for t in &set.triples {
            b[t.state * n_actions + t.action] = (1.0 - cfg.gamma) * q.clamp(t.q_value);
        }
        logger.push(
            step,
            EventPayload::GuidanceApplied {
                guidance_id: set.id,
                mode: "reward_bonus".into(),
                cells,
                bootstrap_iterations: None,
            },
        );
        return;
    }

    if opts.guidance_mode == GuidanceMode::Offline && step == 0 {
        let report = bootstrap(q, set, cfg);
        if !report.converged {
            tracing::warn!(residual = report.max_residual, "bootstrap hit its iteration cap");
        }
        logger.push(
            step,
            EventPayload::GuidanceApplied {
                guidance_id: set.id,
                mode: "bootstrap".into(),
                cells,
                bootstrap_iterations: Some(report.iterations),
            },
        );
    } else {
        set.remaining_window = cfg.guidance_window;
        active.push(set.clone());
        logger.push(
            step,
            EventPayload::GuidanceApplied {
                guidance_id: set.id,
                mode: "window".into(),
                cells,
                bootstrap_iterations: None,
            },
        );
    }
}
