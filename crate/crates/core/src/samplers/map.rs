use super::{NoiseModel, Scratch, WorkingTarget};
use crate::error::{Error, Result};
use crate::linalg::pcg;
use crate::model::ChainState;

const VAR_FLOOR: f64 = 1e-12;
const VAR_CEIL: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapOptions {
    /// Single shared noise variance instead of one per vertex.
    pub homoscedastic: bool,
    /// Update variance components between coefficient solves.
    pub update_variances: bool,
    pub max_outer: usize,
    pub rel_tol: f64,
    pub cg_tol: f64,
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions { homoscedastic: false, update_variances: true, max_outer: 500, rel_tol: 1e-8, cg_tol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapEstimate {
    pub state: ChainState,
    /// Log posterior after each outer iteration.
    pub objective: Vec<f64>,
    pub converged: bool,
    /// No outer iteration decreased the objective beyond rounding.
    pub monotone: bool,
}

/// Log joint posterior (precision parameterization, constants dropped).
pub(crate) fn log_posterior(target: &WorkingTarget, state: &ChainState, homoscedastic: bool) -> f64 {
    let (m, p) = (target.m(), target.p);
    let mix = target.prior_mix(&state.zeta2);
    let mut grad = vec![0.0; state.gamma.len()];
    let mut scratch = Scratch::new(m);
    // -U carries the likelihood (with the -N/2 log σ² terms) and the γ quadratic
    let mut obj = -target.potential_grad_into(&state.gamma, state, &mix, &mut grad, &mut scratch);
    let v = 1.0 / state.tau2;
    obj += 0.5 * (m * p) as f64 * v.ln() - 0.5 * v;
    for z in &state.zeta2 {
        let w = 1.0 / z;
        obj += 0.5 * m as f64 * w.ln() - 0.5 * w;
    }
    if matches!(target.noise, NoiseModel::Diagonal) {
        let (count, precisions): (usize, Vec<f64>) = if homoscedastic {
            (1, vec![1.0 / state.sigma2[0]])
        } else {
            (m, state.sigma2.iter().map(|s| 1.0 / s).collect())
        };
        let xi_coef = 0.5 * count as f64 - 0.5;
        if xi_coef != 0.0 {
            obj += xi_coef * state.xi.ln();
        }
        obj -= state.xi;
        for w in precisions {
            obj += -0.5 * w.ln() - state.xi * w;
        }
    }
    obj
}

fn solve_gamma(target: &WorkingTarget, state: &mut ChainState, tol: f64) -> Result<()> {
    let (k, m) = (target.rank(), target.m());
    let n = k * m;
    let mix = target.prior_mix(&state.zeta2);
    let mut scratch = Scratch::new(m);
    let zeros = vec![0.0; n];
    let mut g0 = vec![0.0; n];
    target.potential_grad_into(&zeros, state, &mix, &mut g0, &mut scratch);
    let b: Vec<f64> = g0.iter().map(|g| -g).collect();

    let d = target.stats.singular_values();
    let prior_diag = target.prior.precision.precision_diagonal();
    let noise_diag: Vec<f64> = match &target.noise {
        NoiseModel::Diagonal => state.sigma2.iter().map(|s| 1.0 / s).collect(),
        NoiseModel::Correlated(h) => h.precision_diagonal(),
    };
    let mut diag = vec![0.0; n];
    for c in 0..k {
        for s in 0..m {
            diag[c * m + s] =
                target.data_weight * d[c] * d[c] * noise_diag[s] + mix[c * k + c] / state.tau2 * prior_diag[s];
        }
    }
    let snapshot = state.clone();
    let scratch = std::cell::RefCell::new(Scratch::new(m));
    let report = pcg(
        |v, out| {
            let mut sc = scratch.borrow_mut();
            target.potential_grad_into(v, &snapshot, &mix, out, &mut sc);
            for (o, bi) in out.iter_mut().zip(&b) {
                *o += bi;
            }
        },
        &diag,
        &b,
        &mut state.gamma,
        tol,
        20 * n.max(50),
    );
    if !report.converged && report.rel_residual > 1e-6 {
        return Err(Error::numerical(format!(
            "coefficient solve stalled at relative residual {:.2e} after {} iterations",
            report.rel_residual, report.iterations
        )));
    }
    Ok(())
}

fn update_modes(target: &WorkingTarget, state: &mut ChainState, homoscedastic: bool) {
    let (m, p) = (target.m(), target.p);
    if matches!(target.noise, NoiseModel::Diagonal) {
        let n = target.stats.n_images() as f64;
        let rss = target.stats.residual_ss(&state.gamma);
        if homoscedastic {
            state.xi = 0.0f64.max(f64::MIN_POSITIVE);
            let total: f64 = rss.iter().sum();
            let w = (0.5 * n * m as f64 - 0.5) / (state.xi + 0.5 * total);
            let s2 = (1.0 / w).clamp(VAR_FLOOR, VAR_CEIL);
            state.sigma2.iter_mut().for_each(|s| *s = s2);
        } else {
            for (s2, r) in state.sigma2.iter_mut().zip(&rss) {
                let w = (0.5 * n - 0.5) / (state.xi + 0.5 * r);
                *s2 = (1.0 / w).clamp(VAR_FLOOR, VAR_CEIL);
            }
            let sum_w: f64 = state.sigma2.iter().map(|s| 1.0 / s).sum();
            state.xi = ((0.5 * m as f64 - 0.5) / (1.0 + sum_w)).max(f64::MIN_POSITIVE);
        }
    }
    let beta = target.beta(&state.gamma);
    let q: Vec<f64> = (0..p).map(|j| target.prior.precision.quad_form_unchecked(&beta[j * m..(j + 1) * m])).collect();
    for j in 0..p {
        let w = 0.5 * m as f64 / (0.5 + 0.5 * q[j] / state.tau2);
        state.zeta2[j] = (1.0 / w).clamp(VAR_FLOOR, VAR_CEIL);
    }
    let s: f64 = (0..p).map(|j| q[j] / state.zeta2[j]).sum();
    let v = 0.5 * (m * p) as f64 / (0.5 + 0.5 * s);
    state.tau2 = (1.0 / v).clamp(VAR_FLOOR, VAR_CEIL);
}

/// Alternating conditional maximization of the working-model posterior:
/// an exact (preconditioned CG) solve for γ, then closed-form modes of
/// the variance precisions.
pub fn map_optimize_working(target: &WorkingTarget, init: Option<ChainState>, opts: MapOptions) -> Result<MapEstimate> {
    let (k, m, p) = (target.rank(), target.m(), target.p);
    if opts.update_variances && !opts.homoscedastic && target.stats.n_images() < 2 {
        return Err(Error::argument("per-vertex variance modes need at least two images"));
    }
    let mut state = match init {
        Some(s) => s,
        None => {
            let d = target.stats.singular_values();
            let proj = target.stats.projected();
            let n = target.stats.n_images() as f64;
            let mut st = ChainState::new(k, m, p, 1.0);
            for c in 0..k {
                for s in 0..m {
                    st.gamma[c * m + s] = proj[c * m + s] / d[c];
                }
            }
            let rss = target.stats.residual_ss(&st.gamma);
            let pooled = (rss.iter().sum::<f64>() / (n * m as f64)).max(VAR_FLOOR);
            for (s2, r) in st.sigma2.iter_mut().zip(&rss) {
                *s2 = if opts.homoscedastic { pooled } else { (r / n).max(1e-3 * pooled).max(VAR_FLOOR) };
            }
            st
        }
    };
    if opts.homoscedastic {
        let s0 = state.sigma2[0];
        state.sigma2.iter_mut().for_each(|s| *s = s0);
    }
    let mut objective = vec![log_posterior(target, &state, opts.homoscedastic)];
    let mut monotone = true;
    let mut converged = false;
    for _ in 0..opts.max_outer {
        solve_gamma(target, &mut state, opts.cg_tol)?;
        if opts.update_variances {
            update_modes(target, &mut state, opts.homoscedastic);
        }
        let obj = log_posterior(target, &state, opts.homoscedastic);
        if !obj.is_finite() {
            return Err(Error::numerical("log posterior became non-finite during MAP optimization"));
        }
        let prev = *objective.last().unwrap();
        if obj < prev - 1e-9 * prev.abs().max(1.0) {
            monotone = false;
        }
        objective.push(obj);
        if !opts.update_variances || (obj - prev).abs() < opts.rel_tol * prev.abs().max(1e-300) {
            converged = true;
            break;
        }
    }
    Ok(MapEstimate { state, objective, converged, monotone })
}
