//! Independent plain Q-learning loop used as the reference for the guided
//! trainer with no guidance. Shares only the environment simulator.
#![allow(dead_code)]

use std::sync::Arc;

use qshape_core::envs::TabularEnv;
use qshape_core::mdp::Mdp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn splitmix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct Reference {
    pub alpha: f64,
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub batch: usize,
}

impl Default for Reference {
    fn default() -> Self {
        Reference {
            alpha: 0.1,
            gamma: 0.99,
            eps_start: 1.0,
            eps_end: 0.05,
            batch: 32,
        }
    }
}

/// Runs `budget` steps and returns the Q-table before every step plus the
/// final one.
pub fn plain_q_learning(r: &Reference, mdp: Arc<Mdp>, max_steps: usize, seed: u64, budget: u64) -> Vec<Vec<f64>> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let r_abs = mdp.r_min.abs().max(mdp.r_max.abs());
    let cap = r_abs / (1.0 - r.gamma);
    let mut env = TabularEnv::new(mdp, max_steps, splitmix(seed, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = vec![0.0f64; ns * na];
    let mut buffer: Vec<(usize, usize, f64, usize, bool)> = Vec::new();
    let horizon = (budget / 5).max(1) as f64;
    let best = |q: &[f64], s: usize| -> usize {
        let row = &q[s * na..(s + 1) * na];
        let mut b = 0;
        for a in 1..na {
            if row[a] > row[b] {
                b = a;
            }
        }
        b
    };
    let mut history = Vec::with_capacity(budget as usize + 1);
    let mut s = 0;
    for step in 0..budget {
        history.push(q.clone());
        if env.is_finished() {
            s = env.reset();
        }
        let eps = r.eps_start + (r.eps_end - r.eps_start) * (step as f64 / horizon).min(1.0);
        let u: f64 = rng.gen();
        let a = if u < eps { rng.gen_range(0..na) } else { best(&q, s) };
        let out = env.step(a).unwrap();
        buffer.push((s, a, out.reward, out.next_state, out.terminal));
        s = out.next_state;
        for _ in 0..r.batch {
            let (bs, ba, br, bn, bd) = buffer[rng.gen_range(0..buffer.len())];
            let next = if bd { 0.0 } else { q[bn * na + best(&q, bn)] };
            let target = (br + r.gamma * next).clamp(-cap, cap);
            let z = bs * na + ba;
            q[z] = (q[z] + r.alpha * (target - q[z])).clamp(-cap, cap);
        }
    }
    history.push(q);
    history
}
