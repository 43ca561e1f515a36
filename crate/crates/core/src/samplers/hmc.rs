use rand::Rng;

use super::{MassMatrix, Scratch, WorkingTarget};
use crate::error::{Error, Result};
use crate::model::ChainState;

/// Sampler settings.
#[derive(Debug, Clone, PartialEq)]
pub struct HmcConfig {
    pub leapfrog_steps: usize,
    pub target_accept: f64,
    /// Dual averaging shrinkage (γ in Hoffman & Gelman).
    pub da_gamma: f64,
    pub da_t0: f64,
    pub da_kappa: f64,
    pub warmup: usize,
    pub samples: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
    /// Fixed initial step size; found heuristically when `None`.
    pub initial_step: Option<f64>,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            leapfrog_steps: 35,
            target_accept: 0.65,
            da_gamma: 0.05,
            da_t0: 10.0,
            da_kappa: 0.75,
            warmup: 5000,
            samples: 2000,
            thin: 10,
            chains: 8,
            seed: 1,
            initial_step: None,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.leapfrog_steps == 0 {
            return Err(Error::argument("leapfrog_steps must be at least 1"));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::argument("target_accept must lie in (0, 1)"));
        }
        if self.thin == 0 || self.chains == 0 {
            return Err(Error::argument("thin and chains must be positive"));
        }
        if self.samples / self.thin < 1 {
            return Err(Error::argument("samples / thin must retain at least one draw"));
        }
        if !(self.da_kappa > 0.5 && self.da_kappa <= 1.0 && self.da_t0 >= 0.0 && self.da_gamma > 0.0) {
            return Err(Error::argument("invalid dual averaging constants"));
        }
        if let Some(e) = self.initial_step {
            if !(e > 0.0) {
                return Err(Error::argument("initial step size must be positive"));
            }
        }
        Ok(())
    }

    /// Stable hash of the settings, stored with the draws.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        (self.leapfrog_steps, self.warmup, self.samples, self.thin, self.chains, self.seed).hash(&mut h);
        for x in [self.target_accept, self.da_gamma, self.da_t0, self.da_kappa, self.initial_step.unwrap_or(0.0)] {
            x.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Step-size adaptation by dual averaging.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    mu: f64,
    target: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    h_bar: f64,
    log_eps_bar: f64,
    t: f64,
}

impl DualAveraging {
    pub fn new(initial_step: f64, cfg: &HmcConfig) -> Self {
        DualAveraging {
            mu: (10.0 * initial_step).ln(),
            target: cfg.target_accept,
            gamma: cfg.da_gamma,
            t0: cfg.da_t0,
            kappa: cfg.da_kappa,
            h_bar: 0.0,
            log_eps_bar: 0.0,
            t: 0.0,
        }
    }

    /// Feeds one acceptance probability; returns the next step size.
    pub fn update(&mut self, accept_prob: f64) -> f64 {
        self.t += 1.0;
        let eta = 1.0 / (self.t + self.t0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target - accept_prob);
        let log_eps = self.mu - self.t.sqrt() / self.gamma * self.h_bar;
        let w = self.t.powf(-self.kappa);
        self.log_eps_bar = w * log_eps + (1.0 - w) * self.log_eps_bar;
        log_eps.exp()
    }

    /// Averaged step size used after warmup.
    pub fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub accepted: bool,
    pub accept_prob: f64,
    /// `H(end) - H(start)`; NaN if the trajectory diverged.
    pub energy_change: f64,
}

/// Runs a leapfrog trajectory from `(gamma, p)` in place; returns the
/// potential at the end. Used directly by the energy-drift tests.
pub fn leapfrog_trajectory(
    target: &WorkingTarget,
    state: &ChainState,
    mass: &MassMatrix,
    gamma: &mut [f64],
    p: &mut [f64],
    step: f64,
    steps: usize,
) -> f64 {
    let mix = target.prior_mix(&state.zeta2);
    let mut scratch = Scratch::new(target.m());
    let mut grad = vec![0.0; gamma.len()];
    let mut vel = vec![0.0; gamma.len()];
    target.potential_grad_into(gamma, state, &mix, &mut grad, &mut scratch);
    leapfrog(target, state, &mix, mass, gamma, p, &mut grad, &mut vel, &mut scratch, step, steps)
}

#[allow(clippy::too_many_arguments)]
fn leapfrog(
    target: &WorkingTarget,
    state: &ChainState,
    mix: &[f64],
    mass: &MassMatrix,
    gamma: &mut [f64],
    p: &mut [f64],
    grad: &mut [f64],
    vel: &mut [f64],
    scratch: &mut Scratch,
    step: f64,
    steps: usize,
) -> f64 {
    let mut u = 0.0;
    for (pi, gi) in p.iter_mut().zip(grad.iter()) {
        *pi -= 0.5 * step * gi;
    }
    for t in 0..steps {
        mass.apply_inverse_into(p, vel);
        for (q, v) in gamma.iter_mut().zip(vel.iter()) {
            *q += step * v;
        }
        u = target.potential_grad_into(gamma, state, mix, grad, scratch);
        if !u.is_finite() {
            return f64::NAN;
        }
        let h = if t + 1 == steps { 0.5 * step } else { step };
        for (pi, gi) in p.iter_mut().zip(grad.iter()) {
            *pi -= h * gi;
        }
    }
    u
}

fn kinetic(mass: &MassMatrix, p: &[f64], vel: &mut [f64]) -> f64 {
    mass.apply_inverse_into(p, vel);
    0.5 * p.iter().zip(vel.iter()).map(|(a, b)| a * b).sum::<f64>()
}

/// One HMC transition for `state.gamma` with the other components fixed.
pub fn hmc_step<R: Rng + ?Sized>(
    state: &mut ChainState,
    target: &WorkingTarget,
    mass: &MassMatrix,
    step: f64,
    steps: usize,
    rng: &mut R,
) -> Result<StepOutcome> {
    if steps == 0 {
        return Err(Error::argument("leapfrog_steps must be at least 1"));
    }
    let n = state.gamma.len();
    let mix = target.prior_mix(&state.zeta2);
    let mut scratch = Scratch::new(target.m());
    let mut grad = vec![0.0; n];
    let mut vel = vec![0.0; n];
    let mut p = vec![0.0; n];
    mass.sample_into(rng, &mut p);
    let u0 = target.potential_grad_into(&state.gamma, state, &mix, &mut grad, &mut scratch);
    if !u0.is_finite() {
        return Err(Error::numerical("potential is not finite at the current state"));
    }
    let h0 = u0 + kinetic(mass, &p, &mut vel);
    let mut q = state.gamma.clone();
    let u1 = leapfrog(target, state, &mix, mass, &mut q, &mut p, &mut grad, &mut vel, &mut scratch, step, steps);
    let h1 = u1 + kinetic(mass, &p, &mut vel);
    let dh = h1 - h0;
    if !dh.is_finite() {
        return Ok(StepOutcome { accepted: false, accept_prob: 0.0, energy_change: f64::NAN });
    }
    let accept_prob = (-dh).exp().min(1.0);
    let accepted = rng.random::<f64>() < accept_prob;
    if accepted {
        state.gamma = q;
    }
    Ok(StepOutcome { accepted, accept_prob, energy_change: dh })
}

/// Single-leapfrog heuristic for a starting step size.
pub fn find_initial_step<R: Rng + ?Sized>(
    state: &ChainState,
    target: &WorkingTarget,
    mass: &MassMatrix,
    rng: &mut R,
) -> f64 {
    let n = state.gamma.len();
    let mix = target.prior_mix(&state.zeta2);
    let mut scratch = Scratch::new(target.m());
    let mut grad = vec![0.0; n];
    let mut vel = vec![0.0; n];
    let mut p0 = vec![0.0; n];
    mass.sample_into(rng, &mut p0);
    let u0 = target.potential_grad_into(&state.gamma, state, &mix, &mut grad, &mut scratch);
    let grad0 = grad.clone();
    let h0 = u0 + kinetic(mass, &p0, &mut vel);
    let mut eps = 1.0f64;
    let log_ratio = |eps: f64, grad: &mut Vec<f64>, vel: &mut Vec<f64>, scratch: &mut Scratch| -> f64 {
        let mut q = state.gamma.clone();
        let mut p = p0.clone();
        grad.copy_from_slice(&grad0);
        let u = leapfrog(target, state, &mix, mass, &mut q, &mut p, grad, vel, scratch, eps, 1);
        let h = u + kinetic(mass, &p, vel);
        let r = h0 - h;
        if r.is_finite() {
            r
        } else {
            f64::NEG_INFINITY
        }
    };
    let first = log_ratio(eps, &mut grad, &mut vel, &mut scratch);
    let up = first > 0.5f64.ln();
    for _ in 0..100 {
        let r = log_ratio(eps, &mut grad, &mut vel, &mut scratch);
        if up && r <= 0.5f64.ln() {
            break;
        }
        if !up && r > 0.5f64.ln() {
            break;
        }
        eps = if up { eps * 2.0 } else { eps * 0.5 };
    }
    eps
}
