use proptest::prelude::*;
use qshape_core::analysis::*;
use qshape_core::envs::EnvSpec;
use qshape_core::heuristics::scripted_guidance;
use qshape_core::mdp::{make_empirical_mdp, random_mdp, Mdp, Policy, Transition, MDP_SCHEMA_VERSION};
use qshape_core::oracle::{contraction_factor, value_iteration, QTable};
use qshape_core::qlearn::{LearnerConfig, ShapingMode, TrainOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every pair sampled once per next state with its exact probability mass
/// reproduced by repetition, so the empirical model equals the true one.
fn exact_copy(mdp: &Mdp, reps: usize) -> Vec<Transition> {
    let mut ts = Vec::new();
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let z = s * mdp.n_actions + a;
            for sp in 0..mdp.n_states {
                let k = (mdp.transitions[z * mdp.n_states + sp] * reps as f64).round() as usize;
                for _ in 0..k {
                    ts.push(Transition { s, a, r: mdp.rewards[z], s_next: sp, done: false });
                }
            }
        }
    }
    ts
}

#[test]
fn exact_dataset_has_no_suboptimality() {
    // Rational kernel so repetition reproduces it exactly.
    let mdp = Mdp::new(
        2,
        2,
        vec![0.0, 1.0, 0.5, 0.2],
        vec![0.5, 0.5, 0.25, 0.75, 1.0, 0.0, 0.0, 1.0],
        0.9,
        vec![1.0, 0.0],
        0.0,
        1.0,
        vec![],
    )
    .unwrap();
    let d = make_empirical_mdp(&exact_copy(&mdp, 4), 2, 2).unwrap();
    let q_star = value_iteration(&mdp, 0.9, mdp.cap(), 1e-13).q;
    let pi_star = q_star.greedy_policy();
    for s in 0..2 {
        let r = suboptimality_terms(&mdp, &d, &q_star, &pi_star, "pi_star", s).unwrap();
        for v in [r.lhs, r.term_a1, r.term_a2, r.term_b, r.learner_gap] {
            assert!(v.abs() <= 1e-9, "{r:?}");
        }
    }
}

/// State 0 chooses between a sure route to the rewarding absorbing state 1
/// (action 0) and a 30% gamble (action 1). The dataset never tries action 0
/// and saw the gamble succeed once.
fn unsampled_optimal_arm() -> (Mdp, qshape_core::mdp::EmpiricalDataset) {
    let mdp = Mdp::new(
        3,
        2,
        vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
        vec![
            0.0, 1.0, 0.0, // s0 a0
            0.0, 0.3, 0.7, // s0 a1
            0.0, 1.0, 0.0, // s1 a0
            0.0, 1.0, 0.0, // s1 a1
            0.0, 0.0, 1.0, // s2 a0
            0.0, 0.0, 1.0, // s2 a1
        ],
        0.9,
        vec![1.0, 0.0, 0.0],
        0.0,
        1.0,
        vec![],
    )
    .unwrap();
    let mut ts = vec![Transition { s: 0, a: 1, r: 0.0, s_next: 1, done: false }];
    for a in 0..2 {
        ts.push(Transition { s: 1, a, r: 1.0, s_next: 1, done: false });
        ts.push(Transition { s: 2, a, r: 0.0, s_next: 2, done: false });
    }
    let d = make_empirical_mdp(&ts, 3, 2).unwrap();
    (mdp, d)
}

#[test]
fn unsampled_optimal_arm_leaves_a_persistent_evaluation_gap() {
    let (mdp, d) = unsampled_optimal_arm();
    let probe = Policy::uniform(3, 2);
    let early = QTable::zeros(3, 2, mdp.cap());
    let late = value_iteration(&d, 0.9, mdp.cap(), 1e-12).q;
    let a = suboptimality_terms(&mdp, &d, &early, &probe, "uniform", 0).unwrap();
    let b = suboptimality_terms(&mdp, &d, &late, &probe, "uniform", 0).unwrap();
    // Hand values: V(s1) = 10, V(s2) = 0. The empirical greedy policy picks
    // the gamble, worth 9 in the data but 0.9 * 0.3 * 10 = 2.7 in truth.
    assert!((a.term_b - (9.0 - 2.7)).abs() < 1e-9, "{a:?}");
    assert_eq!(a.term_b, b.term_b);
    assert!(a.lhs > 0.0 && a.lhs <= a.term_a1 + a.term_a2 + a.term_b + 1e-9);
    assert!(b.learner_gap < 1e-9 && a.learner_gap > 1.0);
}

#[test]
fn decomposition_bounds_the_suboptimality_on_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let ns = rng.gen_range(2..6);
        let na = rng.gen_range(2..4);
        let mdp = random_mdp(&mut rng, ns, na, 0.9);
        let mut ts = Vec::new();
        for s in 0..ns {
            for a in 0..na {
                for _ in 0..rng.gen_range(0..4) {
                    let sp = mdp.sample_next(s, a, &mut rng);
                    ts.push(Transition { s, a, r: mdp.rewards[s * na + a], s_next: sp, done: false });
                }
            }
        }
        let d = make_empirical_mdp(&ts, ns, na).unwrap();
        let probe = Policy::deterministic(na, &(0..ns).map(|_| rng.gen_range(0..na)).collect::<Vec<_>>());
        let q_hat = QTable::zeros(ns, na, mdp.cap());
        for s in 0..ns {
            let r = suboptimality_terms(&mdp, &d, &q_hat, &probe, "random", s).unwrap();
            assert!(r.slack() >= -1e-9, "{r:?}");
        }
    }
}

#[test]
fn equivalence_passes_on_random_models() {
    let report = theorem1_suite(3, 20, 0.9, 100).unwrap();
    assert_eq!(report.passed, 20, "{report:?}");
}

#[test]
fn control_against_control_recovers_immediately() {
    let env = EnvSpec::chain(4).build().unwrap();
    let g = scripted_guidance("good_goal", &env).unwrap();
    let cfg = LearnerConfig { gamma: 0.9, ..LearnerConfig::default() };
    let opts = TrainOptions { budget: 500, eval_every: 100, ..TrainOptions::default() };
    let (treated, control) =
        adaptability_experiment(&env, &cfg, &opts, InjectionSchedule::Never, ShapingMode::QHeuristic, &g).unwrap();
    assert_eq!(treated.recovery_step, Some(0));
    assert_eq!(treated.treated.log, control.log);
}

#[test]
fn injection_steps_follow_the_schedule() {
    let control = [(1000, 0.0), (2000, 5.0), (3000, 9.0), (4000, 10.0)];
    assert_eq!(InjectionSchedule::Start.steps(50_000, &control), vec![0]);
    assert_eq!(InjectionSchedule::Mid.steps(50_000, &control), vec![25_000]);
    assert_eq!(InjectionSchedule::PostConvergence.steps(50_000, &control), vec![3000]);
    assert_eq!(
        InjectionSchedule::Every10k.steps(50_000, &control),
        vec![10_000, 20_000, 30_000, 40_000]
    );
}

#[test]
fn theorem2_sample_count_hand_value() {
    // 800 * ln(320) = 4614.6...
    assert_eq!(sample_complexity(4, 2, 0.1, 0.05), (800.0 * 320f64.ln()).ceil() as u64);
    assert_eq!(sample_complexity(4, 2, 0.1, 0.05), 4615);
}

#[test]
fn lemma2_small_run_has_no_violations() {
    let cfg = Lemma2Config { redraws: 50, ..Lemma2Config::default() };
    let r = lemma2_check(1, &cfg).unwrap();
    assert!(r.violation_rate <= cfg.delta, "{r:?}");
    assert!(r.mean_learner_gap > 0.0);
}

fn two_state_mdp(rewards: Vec<f64>, probs: Vec<f64>) -> Mdp {
    Mdp {
        schema_version: MDP_SCHEMA_VERSION,
        n_states: 2,
        n_actions: 2,
        rewards,
        transitions: probs,
        gamma: 0.9,
        rho: vec![0.5, 0.5],
        r_min: 0.0,
        r_max: 1.0,
        terminal_states: vec![],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn bellman_operator_contracts(
        r in prop::collection::vec(0.0f64..1.0, 4),
        raw in prop::collection::vec(0.001f64..1.0, 8),
        q1 in prop::collection::vec(-10.0f64..10.0, 4),
        q2 in prop::collection::vec(-10.0f64..10.0, 4),
        gamma in 0.0f64..0.999,
    ) {
        let mut probs = raw.clone();
        for row in probs.chunks_mut(2) {
            let t: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= t);
        }
        let mdp = two_state_mdp(r, probs);
        let cap = 1.0 / (1.0 - gamma) + 10.0;
        let a = QTable::from_values(2, 2, cap, q1);
        let b = QTable::from_values(2, 2, cap, q2);
        prop_assume!(a.sup_distance(&b) > 0.0);
        let k = contraction_factor(&mdp, gamma, &a, &b).unwrap();
        prop_assert!(k <= gamma + 1e-12);
    }

    #[test]
    fn every_misestimated_cell_gets_one_label(
        truth in prop::collection::vec(-5.0f64..5.0, 6),
        noise in prop::collection::vec(prop_oneof![Just(0.0), -1.0f64..1.0], 6),
    ) {
        let q_star = QTable::from_values(2, 3, 10.0, truth.clone());
        let est: Vec<f64> = truth.iter().zip(&noise).map(|(t, n)| t + n).collect();
        let q_hat = QTable::from_values(2, 3, 10.0, est);
        let labels = classify_estimation(&q_hat, &q_star).unwrap();
        for s in 0..2 {
            for a in 0..3 {
                let differs = q_hat.get(s, a) != q_star.get(s, a);
                prop_assert_eq!(labels.get(s, a).is_some(), differs);
                match labels.get(s, a) {
                    Some(EstimationCase::UnderOptimalCase1) => prop_assert!(labels.argmax_preserved[s]),
                    Some(EstimationCase::UnderOptimalCase2) => prop_assert!(!labels.argmax_preserved[s]),
                    _ => {}
                }
            }
        }
    }
}

#[test]
fn decomposition_suite_holds_and_is_seed_stable() {
    let a = decomposition_suite(7, 12, 5, 0.9).unwrap();
    assert_eq!((a.models, a.probes_per_model), (12, 5));
    assert_eq!(a.held, 60);
    assert!(a.min_slack >= -1e-9);
    let b = decomposition_suite(7, 12, 5, 0.9).unwrap();
    assert_eq!(a.min_slack.to_bits(), b.min_slack.to_bits());
}
