use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{reward_bounds, Mdp, MDP_SCHEMA_VERSION};

/// Continuous-state, continuous-action dynamics that can be tabulated.
pub trait ContinuousDynamics {
    fn state_dim(&self) -> usize;
    fn action_bounds(&self) -> Vec<(f64, f64)>;

    /// Whether state dimension `dim` wraps around its range (angles).
    fn periodic(&self, _dim: usize) -> bool {
        false
    }

    fn next_state(&self, x: &[f64], u: &[f64]) -> Vec<f64>;

    /// Reward for taking `u` at `x`. During discretization `x_next` is the
    /// center of the destination bin.
    fn reward(&self, x: &[f64], u: &[f64], x_next: &[f64]) -> f64;

    fn is_terminal(&self, _x: &[f64]) -> bool {
        false
    }

    /// Per-dimension interval the initial state is drawn from. `None` means
    /// the whole state range.
    fn initial_region(&self) -> Option<Vec<(f64, f64)>> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationSpec {
    pub state_bins: Vec<usize>,
    pub state_ranges: Vec<(f64, f64)>,
    pub action_bins: Vec<usize>,
}

impl DiscretizationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.state_bins.len() != self.state_ranges.len() {
            return Err(Error::Config(format!(
                "{} state bin counts but {} ranges",
                self.state_bins.len(),
                self.state_ranges.len()
            )));
        }
        if self.state_bins.is_empty() || self.action_bins.is_empty() {
            return Err(Error::Config("need at least one state and one action dimension".into()));
        }
        for (i, &n) in self.state_bins.iter().chain(&self.action_bins).enumerate() {
            if n < 2 {
                return Err(Error::Config(format!("bin count {n} at dimension {i} must be >= 2")));
            }
        }
        for (i, &(lo, hi)) in self.state_ranges.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!("state range {i} [{lo}, {hi}] is degenerate")));
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.state_bins.iter().product()
    }

    pub fn n_actions(&self) -> usize {
        self.action_bins.iter().product()
    }

    fn width(&self, dim: usize) -> f64 {
        let (lo, hi) = self.state_ranges[dim];
        (hi - lo) / self.state_bins[dim] as f64
    }

    /// Per-dimension bin indices of flat state `s` (first dimension slowest).
    pub fn state_coords(&self, mut s: usize) -> Vec<usize> {
        let mut coords = vec![0; self.state_bins.len()];
        for d in (0..self.state_bins.len()).rev() {
            coords[d] = s % self.state_bins[d];
            s /= self.state_bins[d];
        }
        coords
    }

    pub fn flat_state(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .zip(&self.state_bins)
            .fold(0, |acc, (&c, &n)| acc * n + c)
    }

    pub fn state_center(&self, s: usize) -> Vec<f64> {
        self.state_coords(s)
            .iter()
            .enumerate()
            .map(|(d, &c)| self.state_ranges[d].0 + (c as f64 + 0.5) * self.width(d))
            .collect()
    }

    pub fn action_center(&self, a: usize, bounds: &[(f64, f64)]) -> Vec<f64> {
        let mut rem = a;
        let mut coords = vec![0; self.action_bins.len()];
        for d in (0..self.action_bins.len()).rev() {
            coords[d] = rem % self.action_bins[d];
            rem /= self.action_bins[d];
        }
        coords
            .iter()
            .enumerate()
            .map(|(d, &c)| {
                let (lo, hi) = bounds[d];
                lo + (c as f64 + 0.5) * (hi - lo) / self.action_bins[d] as f64
            })
            .collect()
    }

    /// Bin containing `x`. Periodic dimensions wrap; others saturate at the
    /// edge bins.
    pub fn locate(&self, x: &[f64], periodic: impl Fn(usize) -> bool) -> usize {
        let coords: Vec<usize> = x
            .iter()
            .enumerate()
            .map(|(d, &v)| {
                let (lo, hi) = self.state_ranges[d];
                let n = self.state_bins[d];
                let v = if periodic(d) {
                    lo + (v - lo).rem_euclid(hi - lo)
                } else {
                    v
                };
                let raw = ((v - lo) / self.width(d)).floor();
                (raw.max(0.0) as usize).min(n - 1)
            })
            .collect();
        self.flat_state(&coords)
    }

    fn bin_overlaps(&self, s: usize, region: &[(f64, f64)]) -> bool {
        self.state_coords(s).iter().enumerate().all(|(d, &c)| {
            let lo = self.state_ranges[d].0 + c as f64 * self.width(d);
            let hi = lo + self.width(d);
            let (a, b) = region[d];
            lo <= b && a < hi
        })
    }
}

/// Tabulates `dynamics` on the grid given by `spec`. Each (state bin,
/// action bin) pair integrates once from the two centers and puts all mass
/// on the destination bin.
pub fn discretize<D: ContinuousDynamics + ?Sized>(dynamics: &D, spec: &DiscretizationSpec, gamma: f64) -> Result<Mdp> {
    spec.validate()?;
    if spec.state_bins.len() != dynamics.state_dim() {
        return Err(Error::Config(format!(
            "spec has {} state dimensions, dynamics has {}",
            spec.state_bins.len(),
            dynamics.state_dim()
        )));
    }
    let bounds = dynamics.action_bounds();
    if bounds.len() != spec.action_bins.len() {
        return Err(Error::Config(format!(
            "spec has {} action dimensions, dynamics has {}",
            spec.action_bins.len(),
            bounds.len()
        )));
    }

    let (ns, na) = (spec.n_states(), spec.n_actions());
    let mut rewards = vec![0.0; ns * na];
    let mut transitions = vec![0.0; ns * na * ns];
    let mut terminal_states = Vec::new();
    let centers: Vec<Vec<f64>> = (0..ns).map(|s| spec.state_center(s)).collect();
    let action_centers: Vec<Vec<f64>> = (0..na).map(|a| spec.action_center(a, &bounds)).collect();

    for s in 0..ns {
        let x = &centers[s];
        let terminal = dynamics.is_terminal(x);
        if terminal {
            terminal_states.push(s);
        }
        for a in 0..na {
            let z = s * na + a;
            if terminal {
                transitions[z * ns + s] = 1.0;
                continue;
            }
            let u = &action_centers[a];
            let x_next = dynamics.next_state(x, u);
            if x_next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite next state from bin {s} under action bin {a}"
                )));
            }
            let dest = spec.locate(&x_next, |d| dynamics.periodic(d));
            let r = dynamics.reward(x, u, &centers[dest]);
            if !r.is_finite() {
                return Err(Error::Numeric(format!("non-finite reward at bin {s}, action bin {a}")));
            }
            rewards[z] = r;
            transitions[z * ns + dest] = 1.0;
        }
    }

    let mut rho: Vec<f64> = match dynamics.initial_region() {
        Some(region) => (0..ns)
            .map(|s| if spec.bin_overlaps(s, &region) && !terminal_states.contains(&s) { 1.0 } else { 0.0 })
            .collect(),
        None => (0..ns)
            .map(|s| if terminal_states.contains(&s) { 0.0 } else { 1.0 })
            .collect(),
    };
    let mass: f64 = rho.iter().sum();
    if mass == 0.0 {
        return Err(Error::Config("initial region covers no non-terminal bin".into()));
    }
    rho.iter_mut().for_each(|p| *p /= mass);

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
        terminal_states,
    })
}
