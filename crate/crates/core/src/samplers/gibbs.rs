use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::WorkingTarget;
use crate::model::ChainState;

/// Shape parameters of the Gamma full conditionals for given dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaShapes {
    pub sigma_precision: f64,
    pub xi: f64,
    pub zeta_precision: f64,
    pub tau_precision: f64,
}

impl GammaShapes {
    pub fn new(n: usize, m: usize, p: usize) -> Self {
        GammaShapes {
            sigma_precision: 0.5 + 0.5 * n as f64,
            xi: 0.5 + 0.5 * m as f64,
            zeta_precision: 1.0 + 0.5 * m as f64,
            tau_precision: 1.0 + 0.5 * (m * p) as f64,
        }
    }
}

#[inline]
fn gamma_rate<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    Gamma::new(shape, 1.0 / rate).expect("positive gamma parameters").sample(rng)
}

/// `σ⁻²(s) ~ Gamma(1/2 + n/2, ξ + rss(s)/2)`; writes variances into `sigma2`.
pub fn sample_sigma_precisions<R: Rng + ?Sized>(rss: &[f64], n: usize, xi: f64, sigma2: &mut [f64], rng: &mut R) {
    let shape = 0.5 + 0.5 * n as f64;
    for (s2, r) in sigma2.iter_mut().zip(rss) {
        let w = gamma_rate(shape, xi + 0.5 * r, rng);
        *s2 = 1.0 / w.max(f64::MIN_POSITIVE);
    }
}

/// Lower bound on sampled noise variances, relative to the mean square of
/// the data. Exactly fitted data would otherwise let `σ²` and `ξ` collapse
/// together towards zero.
pub fn noise_floor(stats: &crate::model::SufficientStats) -> f64 {
    let n = stats.n_images().max(1) as f64;
    let ms = stats.sumsq().iter().sum::<f64>() / (n * stats.m() as f64);
    (1e-8 * ms).max(1e-300)
}

/// Gibbs sweep over the variance components, in the order σ²(·), ξ, ζ², τ²,
/// holding `state.gamma` fixed. `ξ` is refreshed with `σ²`.
pub fn gibbs_update_variances<R: Rng + ?Sized>(
    state: &mut ChainState,
    target: &WorkingTarget,
    flags: super::UpdateFlags,
    rng: &mut R,
) {
    let m = target.m();
    let p = target.p;
    let stats = &target.stats;
    if flags.sigma2 {
        let rss = stats.residual_ss(&state.gamma);
        sample_sigma_precisions(&rss, stats.n_images(), state.xi, &mut state.sigma2, rng);
        let floor = noise_floor(stats);
        state.sigma2.iter_mut().for_each(|s| *s = s.max(floor));
        let sum_prec: f64 = state.sigma2.iter().map(|s| 1.0 / s).sum();
        state.xi = gamma_rate(0.5 + 0.5 * m as f64, 1.0 + sum_prec, rng);
    }
    if flags.zeta2 || flags.tau2 {
        let beta = target.beta(&state.gamma);
        let q: Vec<f64> =
            (0..p).map(|j| target.prior.precision.quad_form_unchecked(&beta[j * m..(j + 1) * m])).collect();
        if flags.zeta2 {
            for j in 0..p {
                let w = gamma_rate(1.0 + 0.5 * m as f64, 0.5 + q[j] / (2.0 * state.tau2), rng);
                state.zeta2[j] = 1.0 / w;
            }
        }
        if flags.tau2 {
            let s: f64 = (0..p).map(|j| q[j] / state.zeta2[j]).sum();
            let w = gamma_rate(1.0 + 0.5 * (m * p) as f64, 0.5 + 0.5 * s, rng);
            state.tau2 = 1.0 / w;
        }
    }
}
