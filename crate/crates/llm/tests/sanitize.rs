use proptest::prelude::*;
use qshape_core::envs::{EnvSchema, EnvSpec};
use qshape_core::qlearn::{GuidanceSet, GuidanceSource, GuidanceTriple};
use qshape_llm::sanitize_guidance;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn schema() -> EnvSchema {
    EnvSpec::gridworld(3).build().unwrap().schema
}

fn set(triples: Vec<GuidanceTriple>) -> GuidanceSet {
    GuidanceSet::new(GuidanceSource::Llm, triples)
}

#[test]
fn out_of_range_state_is_dropped() {
    let s = schema();
    let out = sanitize_guidance(&set(vec![GuidanceTriple::new(s.n_states + 5, 0, 1.0)]), &s, 10.0);
    assert_eq!(out.dropped, 1);
    assert!(out.set.triples.is_empty());
    assert!(out.all_dropped);
}

#[test]
fn large_values_clamp_to_cap() {
    let out = sanitize_guidance(&set(vec![GuidanceTriple::new(0, 0, 100.0), GuidanceTriple::new(1, 0, -100.0)]), &schema(), 10.0);
    assert_eq!(out.set.triples, vec![GuidanceTriple::new(0, 0, 10.0), GuidanceTriple::new(1, 0, -10.0)]);
    assert_eq!(out.clamped, 2);
}

#[test]
fn non_finite_values_are_dropped() {
    let out = sanitize_guidance(&set(vec![GuidanceTriple::new(0, 0, f64::NAN), GuidanceTriple::new(0, 1, f64::INFINITY)]), &schema(), 10.0);
    assert_eq!(out.dropped, 2);
}

#[test]
fn repeated_pairs_keep_the_last() {
    let out = sanitize_guidance(
        &set(vec![GuidanceTriple::new(0, 0, 1.0), GuidanceTriple::new(2, 1, 5.0), GuidanceTriple::new(0, 0, 3.0)]),
        &schema(),
        10.0,
    );
    assert_eq!(out.set.triples, vec![GuidanceTriple::new(2, 1, 5.0), GuidanceTriple::new(0, 0, 3.0)]);
    assert_eq!(out.duplicates, 1);
}

#[test]
fn double_application_changes_nothing_on_random_dirty_sets() {
    let s = schema();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let cap = rng.gen_range(0.5..100.0);
        let triples = (0..rng.gen_range(0..20))
            .map(|_| {
                let q = match rng.gen_range(0..5) {
                    0 => f64::NAN,
                    1 => f64::NEG_INFINITY,
                    _ => rng.gen_range(-5.0 * cap..5.0 * cap),
                };
                GuidanceTriple::new(rng.gen_range(0..s.n_states + 3), rng.gen_range(0..s.n_actions + 2), q)
            })
            .collect();
        let once = sanitize_guidance(&set(triples), &s, cap);
        let twice = sanitize_guidance(&once.set, &s, cap);
        assert_eq!(once.set, twice.set);
        assert_eq!((twice.dropped, twice.clamped, twice.duplicates), (0, 0, 0));
    }
}

proptest! {
    #[test]
    fn output_is_always_usable(raw in prop::collection::vec((0usize..20, 0usize..6, -1e6f64..1e6), 0..30), cap in 0.1f64..1e3) {
        let s = schema();
        let out = sanitize_guidance(&set(raw.iter().map(|&(a, b, q)| GuidanceTriple::new(a, b, q)).collect()), &s, cap);
        let mut seen = std::collections::HashSet::new();
        for t in &out.set.triples {
            prop_assert!(t.state < s.n_states && t.action < s.n_actions);
            prop_assert!(t.q_value.abs() <= cap);
            prop_assert!(seen.insert((t.state, t.action)));
        }
        prop_assert_eq!(out.dropped + out.duplicates + out.set.triples.len(), raw.len());
    }
}
