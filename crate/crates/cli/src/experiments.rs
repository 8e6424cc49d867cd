use std::collections::BTreeMap;

use qshape_core::analysis::*;
use qshape_core::heuristics::scripted_guidance;
use qshape_core::qlearn::{GuidanceSet, ShapingMode};
use rayon::prelude::*;
use serde::Serialize;

use crate::output::{csv_bytes, Artifacts, Series};
use crate::spec::{Experiment, ExperimentSpec};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Criterion {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Criterion {
    fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Criterion {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

fn core(e: qshape_core::Error) -> CliError {
    CliError::Run(e.to_string())
}

fn fmt_opt(v: Option<u64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Runs the experiment in memory. Nothing touches the disk here.
pub fn run(spec: &ExperimentSpec) -> Result<(Artifacts, Vec<Criterion>), CliError> {
    match spec.experiment {
        Experiment::Theorem1 => theorem1(spec),
        Experiment::Lemma2 => lemma2(spec),
        Experiment::Theorem2 => theorem2(spec),
        Experiment::Suboptimality => suboptimality(spec),
        Experiment::Efficiency => efficiency(spec),
        Experiment::Adaptability => adaptability(spec),
    }
}

fn per_seed_name(spec: &ExperimentSpec, seed: u64, suffix: &str) -> String {
    format!("{}_{}_{seed}{suffix}", spec.experiment.name(), spec.env_label())
}

fn theorem1(spec: &ExperimentSpec) -> Result<(Artifacts, Vec<Criterion>), CliError> {
    let t = &spec.theory;
    let results: Vec<EquivalenceInstance> = spec
        .seeds
        .par_iter()
        .map(|&seed| equivalence_instance(seed, t.gamma, t.sweeps_guided))
        .collect::<Result<_, _>>()
        .map_err(core)?;
    let mut art = Artifacts::default();
    for r in &results {
        art.file(
            per_seed_name(spec, r.seed, ".csv"),
            csv_bytes(
                &["seed", "n_states", "n_actions", "sweeps", "achieved_gap", "pass"],
                [vec![
                    r.seed.to_string(),
                    r.n_states.to_string(),
                    r.n_actions.to_string(),
                    r.report.sweeps.to_string(),
                    r.report.achieved_gap.to_string(),
                    r.report.pass.to_string(),
                ]],
            )?,
        );
    }
    let passed = results.iter().filter(|r| r.report.pass).count();
    let worst = results.iter().map(|r| r.report.achieved_gap).fold(0.0, f64::max);
    Ok((
        art,
        vec![Criterion::new(
            "equivalence",
            passed == results.len(),
            format!("{passed}/{} instances within 1e-8 (worst gap {worst:.3e})", results.len()),
        )],
    ))
}

fn lemma2(spec: &ExperimentSpec) -> Result<(Artifacts, Vec<Criterion>), CliError> {
    let cfg = &spec.lemma2;
    let reports: Vec<(u64, Lemma2Report)> = spec
        .seeds
        .par_iter()
        .map(|&seed| lemma2_check(seed, cfg).map(|r| (seed, r)))
        .collect::<Result<_, _>>()
        .map_err(core)?;
    let mut art = Artifacts::default();
    for (seed, r) in &reports {
        art.file(
            per_seed_name(spec, *seed, ".csv"),
            csv_bytes(
                &["seed", "redraws", "violations", "violation_rate", "model_gap_violations", "mean_learner_gap", "mean_bound"],
                [vec![
                    seed.to_string(),
                    r.redraws.to_string(),
                    r.violations.to_string(),
                    r.violation_rate.to_string(),
                    r.model_gap_violations.to_string(),
                    r.mean_learner_gap.to_string(),
                    r.mean_bound.to_string(),
                ]],
            )?,
        );
    }
    let ok = reports.iter().all(|(_, r)| r.violation_rate <= cfg.delta);
    let worst = reports.iter().map(|(_, r)| r.violation_rate).fold(0.0, f64::max);
    Ok((
        art,
        vec![Criterion::new(
            "lemma2_bound",
            ok,
            format!("worst violation rate {worst:.4} against delta {}", cfg.delta),
        )],
    ))
}

fn theorem2(spec: &ExperimentSpec) -> Result<(Artifacts, Vec<Criterion>), CliError> {
    let t = &spec.theory;
    let reports: Vec<(u64, Theorem2Report)> = spec
        .seeds
        .par_iter()
        .map(|&seed| theorem2_check(seed, t.n_states, t.n_actions, t.epsilon, t.delta, t.gamma, t.trials).map(|r| (seed, r)))
        .collect::<Result<_, _>>()
        .map_err(core)?;
    let mut art = Artifacts::default();
    for (seed, r) in &reports {
        art.file(
            per_seed_name(spec, *seed, ".csv"),
            csv_bytes(
                &["seed", "samples_per_pair", "trials", "within_epsilon", "worst_error"],
                [vec![
                    seed.to_string(),
                    r.samples_per_pair.to_string(),
                    r.trials.to_string(),
                    r.within_epsilon.to_string(),
                    r.worst_error.to_string(),
                ]],
            )?,
        );
    }
    let need = |r: &Theorem2Report| (r.within_epsilon as f64) >= (1.0 - t.delta) * r.trials as f64;
    let ok = reports.iter().all(|(_, r)| need(r));
    let n = sample_complexity(t.n_states, t.n_actions, t.epsilon, t.delta);
    let worst = reports.iter().map(|(_, r)| r.within_epsilon).min().unwrap_or(0);
    Ok((
        art,
        vec![Criterion::new(
            "sample_complexity_coverage",
            ok,
            format!("{n} samples per pair; worst seed had {worst}/{} trials within {}", t.trials, t.epsilon),
        )],
    ))
}

fn suboptimality(spec: &ExperimentSpec) -> Result<(Artifacts, Vec<Criterion>), CliError> {
    let t = &spec.theory;
    let mut art = Artifacts::default();
    let mut ok = true;
    let mut details = Vec::new();
    for &seed in &spec.seeds {
        let r = decomposition_suite(seed, t.models, t.probes, t.gamma).map_err(core)?;
        art.file(
            per_seed_name(spec, seed, ".csv"),
            csv_bytes(
                &["seed", "models", "probes_per_model", "held", "min_slack"],
                [vec![
                    seed.to_string(),
                    r.models.to_string(),
                    r.probes_per_model.to_string(),
                    r.held.to_string(),
                    r.min_slack.to_string(),
                ]],
            )?,
        );
        let total = r.models * r.probes_per_model;
        ok &= r.held == total;
        details.push(format!("seed {seed}: {}/{total}", r.held));
    }
    Ok((art, vec![Criterion::new("decomposition_inequality", ok, details.join(", "))]))
}

fn scenario(spec: &ExperimentSpec) -> Result<GuidanceSet, CliError> {
    let name = spec
        .run
        .scenario
        .as_deref()
        .ok_or_else(|| CliError::Config(format!("{} needs a guidance scenario", spec.experiment.name())))?;
    scripted_guidance(name, &spec.env).map_err(|e| CliError::Config(e.to_string()))
}

fn efficiency(spec: &ExperimentSpec) -> Result<(Artifacts, Vec<Criterion>), CliError> {
    let guidance = scenario(spec)?;
    let cfg = spec.run.learner_config(&spec.env);
    let opts = spec.run.train_options();
    let r = efficiency_experiment(&spec.env, &cfg, &opts, &spec.seeds, &guidance).map_err(core)?;
    let mut art = Artifacts::default();
    for ((row, g), u) in r.rows.iter().zip(&r.guided).zip(&r.unguided) {
        let (ge, ue) = (g.log.evaluations(), u.log.evaluations());
        let rows = ge.iter().zip(&ue).map(|(a, b)| vec![a.0.to_string(), a.1.to_string(), b.1.to_string()]);
        art.file(per_seed_name(spec, row.seed, ".csv"), csv_bytes(&["step", "guided_return", "unguided_return"], rows)?);
        art.plot(
            per_seed_name(spec, row.seed, ".svg"),
            format!("{} seed {}: evaluation return", spec.env_label(), row.seed),
            vec![
                Series::new("guided", ge),
                Series::new("unguided", ue),
                Series::flat("80% of optimal", r.threshold, opts.budget),
            ],
        );
    }
    let summary = r
        .rows
        .iter()
        .map(|row| vec![row.seed.to_string(), fmt_opt(row.guided_steps), fmt_opt(row.unguided_steps)]);
    art.file(
        format!("efficiency_{}_summary.csv", spec.env_label()),
        csv_bytes(&["seed", "guided_steps_to_80pct", "unguided_steps_to_80pct"], summary)?,
    );
    Ok((
        art,
        vec![Criterion::new(
            "sample_efficiency",
            r.ratio <= 0.7,
            format!(
                "median steps to {:.3}: guided {} vs unguided {} (ratio {:.3}; unreached runs count as budget + eval_every)",
                r.threshold, r.guided_median, r.unguided_median, r.ratio
            ),
        )],
    ))
}

fn mode_name(mode: ShapingMode) -> &'static str {
    match mode {
        ShapingMode::QHeuristic => "q_heuristic",
        ShapingMode::RewardShaping => "reward_shaping",
        ShapingMode::None => "none",
    }
}

fn adaptability(spec: &ExperimentSpec) -> Result<(Artifacts, Vec<Criterion>), CliError> {
    let guidance = scenario(spec)?;
    let base = spec.run.learner_config(&spec.env);
    let opts = spec.run.train_options();
    type SeedResult = (u64, Vec<(u64, f64)>, Vec<AdaptabilityResult>);
    let per_seed: Vec<SeedResult> = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let cfg = qshape_core::qlearn::LearnerConfig { seed, ..base.clone() };
            let control = adaptability_control(&spec.env, &cfg, &opts)?;
            let mut treated = Vec::new();
            for &schedule in &spec.schedules {
                for &mode in &spec.modes {
                    treated.push(adaptability_treated(&spec.env, &cfg, &opts, schedule, mode, &guidance, &control)?);
                }
            }
            Ok((seed, control.log.evaluations(), treated))
        })
        .collect::<Result<_, qshape_core::Error>>()
        .map_err(core)?;

    let mut art = Artifacts::default();
    let mut report = Vec::new();
    // (schedule, mode) -> recovered count
    let mut recovered: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (seed, control, treated) in &per_seed {
        let rows = control.iter().map(|e| vec![e.0.to_string(), e.1.to_string()]);
        art.file(per_seed_name(spec, *seed, "_control.csv"), csv_bytes(&["step", "mean_return"], rows)?);
        for (si, &schedule) in spec.schedules.iter().enumerate() {
            let mut series = vec![Series::new("control", control.clone())];
            for (mi, &mode) in spec.modes.iter().enumerate() {
                let r = &treated[si * spec.modes.len() + mi];
                let evals = r.treated.log.evaluations();
                let suffix = format!("_{}_{}.csv", schedule.name(), mode_name(mode));
                let rows = evals.iter().map(|e| vec![e.0.to_string(), e.1.to_string()]);
                art.file(per_seed_name(spec, *seed, &suffix), csv_bytes(&["step", "mean_return"], rows)?);
                let injections: Vec<String> = r.injection_steps.iter().map(u64::to_string).collect();
                report.push(vec![
                    seed.to_string(),
                    schedule.name().to_string(),
                    mode_name(mode).to_string(),
                    injections.join(" "),
                    fmt_opt(r.recovery_step),
                ]);
                *recovered.entry((si, mi)).or_default() += r.recovery_step.is_some() as usize;
                series.push(Series::new(mode_name(mode), evals));
            }
            art.plot(
                per_seed_name(spec, *seed, &format!("_{}.svg", schedule.name())),
                format!("{} seed {seed}: wrong guidance, {} schedule", spec.env_label(), schedule.name()),
                series,
            );
        }
    }
    art.file(
        format!("adaptability_{}_recovery.csv", spec.env_label()),
        csv_bytes(&["seed", "schedule", "mode", "injection_steps", "recovery_step"], report)?,
    );

    let n = spec.seeds.len();
    let needed = (n * 8).div_ceil(10);
    let mut criteria = Vec::new();
    for (si, schedule) in spec.schedules.iter().enumerate() {
        for (mi, &mode) in spec.modes.iter().enumerate() {
            let rec = recovered.get(&(si, mi)).copied().unwrap_or(0);
            let (name, pass, detail) = match mode {
                ShapingMode::RewardShaping => (
                    format!("{}_reward_shaping_stays_biased", schedule.name()),
                    n - rec >= needed,
                    format!("{}/{n} seeds never recovered (need {needed})", n - rec),
                ),
                _ => (
                    format!("{}_{}_recovers", schedule.name(), mode_name(mode)),
                    rec >= needed,
                    format!("{rec}/{n} seeds recovered to 95% of control (need {needed})"),
                ),
            };
            criteria.push(Criterion::new(name, pass, detail));
        }
    }
    Ok((art, criteria))
}
