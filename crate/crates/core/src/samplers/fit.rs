use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{
    find_initial_step, gibbs_update_variances, hmc_step, map_optimize_working, DualAveraging, HmcConfig, MapEstimate,
    MapOptions, MassMatrix, NoiseModel, SpatialPrior, WorkingTarget,
};
use crate::error::{Error, Result};
use crate::inference::{ChainSummary, DrawsMeta, PosteriorDraws, VarianceTrace, Variant};
use crate::linalg::pcg;
use crate::model::{ChainState, Design, InMemoryOutcomes, RegressionDataset, SufficientStats};
use crate::vecchia::{CovarianceSpec, Nugget, VecchiaOptions, VecchiaPrecision};

const MIN_STEP: f64 = 1e-10;

/// Which variance components the Gibbs sweep refreshes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateFlags {
    /// `σ²(·)` together with `ξ`.
    pub sigma2: bool,
    pub zeta2: bool,
    pub tau2: bool,
}

impl UpdateFlags {
    pub fn all() -> Self {
        UpdateFlags { sigma2: true, zeta2: true, tau2: true }
    }

    pub fn none() -> Self {
        UpdateFlags { sigma2: false, zeta2: false, tau2: false }
    }

    fn any(self) -> bool {
        self.sigma2 || self.zeta2 || self.tau2
    }
}

impl Default for UpdateFlags {
    fn default() -> Self {
        Self::all()
    }
}

/// Per-fit switches that sit outside [`HmcConfig`].
#[derive(Debug, Clone)]
pub struct ChainControl {
    pub flags: UpdateFlags,
    /// Starting state shared by all chains (jittered per chain); data-driven when `None`.
    pub init: Option<ChainState>,
    pub variant: Variant,
    /// Record `σ²` draws alongside `β`.
    pub keep_sigma2: bool,
}

impl Default for ChainControl {
    fn default() -> Self {
        ChainControl { flags: UpdateFlags::all(), init: None, variant: Variant::Working, keep_sigma2: true }
    }
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Least-squares start with a small per-chain perturbation.
fn initial_state<R: Rng + ?Sized>(target: &WorkingTarget, rng: &mut R) -> ChainState {
    let (k, m, p) = (target.rank(), target.m(), target.p);
    let d = target.stats.singular_values();
    let proj = target.stats.projected();
    let n = target.stats.n_images();
    let mut st = ChainState::new(k, m, p, 1.0);
    for c in 0..k {
        for s in 0..m {
            st.gamma[c * m + s] = proj[c * m + s] / d[c];
        }
    }
    if n > 0 {
        let rss = target.stats.residual_ss(&st.gamma);
        let pooled = (rss.iter().sum::<f64>() / (n * m) as f64).max(1e-8);
        for (s2, r) in st.sigma2.iter_mut().zip(&rss) {
            *s2 = (r / n as f64).max(1e-3 * pooled);
        }
    }
    for c in 0..k {
        for s in 0..m {
            let sd = (st.sigma2[s]).sqrt() / d[c];
            st.gamma[c * m + s] += 0.1 * sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let beta = target.beta(&st.gamma);
    let ms = beta.iter().map(|b| b * b).sum::<f64>() / beta.len() as f64;
    st.tau2 = ms.max(1e-6);
    st
}

fn jitter_state<R: Rng + ?Sized>(state: &ChainState, target: &WorkingTarget, rng: &mut R) -> ChainState {
    let mut st = state.clone();
    let (k, m) = (target.rank(), target.m());
    let d = target.stats.singular_values();
    for c in 0..k {
        for s in 0..m {
            let sd = 1e-2 * (st.tau2.sqrt()).min(st.sigma2[s].sqrt() / d[c].max(1e-300));
            st.gamma[c * m + s] += sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    st
}

/// Runs one chain; `on_draw` sees every retained state. Returns the frozen
/// step size and the post-warmup acceptance rate.
pub fn run_chain(
    target: &WorkingTarget,
    cfg: &HmcConfig,
    control: &ChainControl,
    chain: usize,
    on_draw: &mut dyn FnMut(&ChainState),
) -> Result<ChainSummary> {
    cfg.validate()?;
    let mut rng = chain_rng(cfg.seed, chain);
    let mut state = match &control.init {
        Some(s) => jitter_state(s, target, &mut rng),
        None => initial_state(target, &mut rng),
    };
    state.validate()?;
    let mut mass = MassMatrix::for_state(target, &state)?;
    let mut step = match cfg.initial_step {
        Some(e) => e,
        None => find_initial_step(&state, target, &mass, &mut rng),
    };
    let mut da = DualAveraging::new(step, cfg);
    for _ in 0..cfg.warmup {
        let out = hmc_step(&mut state, target, &mass, step, cfg.leapfrog_steps, &mut rng)?;
        step = da.update(out.accept_prob);
        if !(step > MIN_STEP) || !step.is_finite() {
            return Err(Error::numerical(format!("chain {chain}: step size collapsed to {step:.3e} during warmup")));
        }
        if control.flags.any() {
            gibbs_update_variances(&mut state, target, control.flags, &mut rng);
            mass = MassMatrix::for_state(target, &state)?;
        }
    }
    if cfg.warmup > 0 {
        step = da.final_step();
    }
    let mut accepted = 0usize;
    for it in 0..cfg.samples {
        let out = hmc_step(&mut state, target, &mass, step, cfg.leapfrog_steps, &mut rng)?;
        if out.accepted {
            accepted += 1;
        }
        if out.energy_change.is_nan() {
            step *= 0.8;
            if step < MIN_STEP {
                return Err(Error::numerical(format!("chain {chain}: repeated divergent trajectories")));
            }
            log::warn!("chain {chain}: divergent trajectory, step size reduced to {step:.3e}");
        }
        if control.flags.any() {
            gibbs_update_variances(&mut state, target, control.flags, &mut rng);
            mass = MassMatrix::for_state(target, &state)?;
        }
        if (it + 1) % cfg.thin == 0 {
            on_draw(&state);
        }
    }
    Ok(ChainSummary { step_size: step, accept_rate: accepted as f64 / cfg.samples.max(1) as f64 })
}

struct ChainOutput {
    beta: Vec<f64>,
    sigma2: Vec<f64>,
    traces: Vec<VarianceTrace>,
    summary: ChainSummary,
    kept: usize,
}

/// Runs `cfg.chains` chains in parallel and collects `β` draws.
pub(crate) fn sample_target(target: &WorkingTarget, cfg: &HmcConfig, control: &ChainControl) -> Result<PosteriorDraws> {
    cfg.validate()?;
    let outputs: Vec<Result<ChainOutput>> = (0..cfg.chains)
        .into_par_iter()
        .map(|chain| {
            let mut out = ChainOutput {
                beta: Vec::new(),
                sigma2: Vec::new(),
                traces: Vec::new(),
                summary: ChainSummary { step_size: 0.0, accept_rate: 0.0 },
                kept: 0,
            };
            let summary = run_chain(target, cfg, control, chain, &mut |st| {
                out.beta.extend(target.beta(&st.gamma));
                if control.keep_sigma2 {
                    out.sigma2.extend_from_slice(&st.sigma2);
                }
                out.traces.push(VarianceTrace { tau2: st.tau2, xi: st.xi, zeta2: st.zeta2.clone() });
                out.kept += 1;
            })?;
            out.summary = summary;
            Ok(out)
        })
        .collect();
    let mut beta = Vec::new();
    let mut sigma2 = Vec::new();
    let mut traces = Vec::new();
    let mut chains = Vec::new();
    let mut lengths = Vec::new();
    for o in outputs {
        let o = o?;
        beta.extend(o.beta);
        sigma2.extend(o.sigma2);
        traces.extend(o.traces);
        chains.push(o.summary);
        lengths.push(o.kept);
    }
    let meta = DrawsMeta { variant: control.variant, seed: cfg.seed, config_hash: cfg.fingerprint() };
    let mut draws = PosteriorDraws::new(target.p, target.m(), beta, lengths, meta)?;
    if control.keep_sigma2 {
        draws.sigma2 = Some(sigma2);
    }
    draws.traces = traces;
    draws.chains = chains;
    Ok(draws)
}

/// Working model: HMC for γ alternating with Gibbs variance updates.
pub fn fit_working(dataset: &RegressionDataset, prior: &SpatialPrior, cfg: &HmcConfig) -> Result<PosteriorDraws> {
    let stats = Arc::new(dataset.sufficient_stats()?);
    let target = WorkingTarget::new(stats, &dataset.design, prior.clone())?;
    sample_target(&target, cfg, &ChainControl::default())
}

/// Inputs of the marginal variant taken from hyperparameter estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalPlan {
    /// Spatial variance `τ̂²` of the error process.
    pub tau2: f64,
}

/// Per-vertex noise variances from the sill: `max(sill - τ², 1e-6 sill)`,
/// with `sill(s) = RSS(s)/(N-1)`.
pub fn sill_variances(stats: &SufficientStats, gamma: &[f64], tau2: f64) -> Result<Vec<f64>> {
    let n = stats.n_images();
    if n < 2 {
        return Err(Error::argument("sill estimation needs at least two images"));
    }
    Ok(stats
        .residual_ss(gamma)
        .into_iter()
        .map(|r| {
            let sill = r / (n - 1) as f64;
            (sill - tau2).max(1e-6 * sill).max(1e-300)
        })
        .collect())
}

/// Marginal variant: the error covariance `H̃ = τ̂²C + diag(σ²)` is fixed
/// from a MAP fit and the sill; only `ζ²` is Gibbs-updated.
pub fn fit_marginal(
    dataset: &RegressionDataset,
    prior: &SpatialPrior,
    plan: &MarginalPlan,
    cfg: &HmcConfig,
) -> Result<PosteriorDraws> {
    let stats = Arc::new(dataset.sufficient_stats()?);
    fit_marginal_stats(stats, &dataset.design, prior, plan, cfg)
}

pub(crate) fn fit_marginal_stats(
    stats: Arc<SufficientStats>,
    design: &Design,
    prior: &SpatialPrior,
    plan: &MarginalPlan,
    cfg: &HmcConfig,
) -> Result<PosteriorDraws> {
    if !(plan.tau2 >= 0.0 && plan.tau2.is_finite()) {
        return Err(Error::argument("marginal tau2 must be finite and non-negative"));
    }
    let working = WorkingTarget::new(stats.clone(), design, prior.clone())?;
    let map = map_optimize_working(&working, None, MapOptions::default())?;
    let sigma2 = sill_variances(&stats, &map.state.gamma, plan.tau2)?;
    let h = marginal_covariance(prior, plan.tau2, sigma2.clone())?;
    let target = working.with_noise(NoiseModel::Correlated(Arc::new(h)));
    let mut init = map.state;
    init.sigma2 = sigma2;
    if plan.tau2 > 0.0 {
        init.tau2 = plan.tau2;
    }
    let control = ChainControl {
        flags: UpdateFlags { sigma2: false, zeta2: true, tau2: false },
        init: Some(init),
        variant: Variant::Marginal,
        keep_sigma2: false,
    };
    sample_target(&target, cfg, &control)
}

/// Vecchia approximation of `τ²C + diag(σ²)` on the prior neighborhoods.
pub fn marginal_covariance(prior: &SpatialPrior, tau2: f64, sigma2: Vec<f64>) -> Result<VecchiaPrecision> {
    let spec = CovarianceSpec { kernel: prior.kernel, scale: tau2, nugget: Nugget::PerVertex(sigma2) };
    let opts = VecchiaOptions { max_neighbors: prior.precision.meta().max_neighbors, ..VecchiaOptions::default() };
    VecchiaPrecision::build_with(&prior.mesh, &prior.index, &spec, opts)
}

/// `argmin_ω ½ωᵀ(τ⁻²C̃⁻¹ + σ⁻²I)ω - σ⁻²ωᵀr`, by Jacobi-preconditioned CG.
pub fn solve_omega(
    precision: &VecchiaPrecision,
    tau2: f64,
    sigma2: f64,
    r: &[f64],
    warm: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let m = precision.len();
    if r.len() != m {
        return Err(Error::argument("residual length does not match the precision"));
    }
    if tau2 <= 0.0 {
        return Ok(vec![0.0; m]);
    }
    let (a, b) = (1.0 / tau2, 1.0 / sigma2);
    let diag: Vec<f64> = precision.precision_diagonal().iter().map(|d| a * d + b).collect();
    let rhs: Vec<f64> = r.iter().map(|v| b * v).collect();
    let mut x = warm.map(|w| w.to_vec()).unwrap_or_else(|| vec![0.0; m]);
    let report = pcg(
        |v, out| {
            precision.apply_precision_into(v, out);
            for (o, vi) in out.iter_mut().zip(v) {
                *o = a * *o + b * vi;
            }
        },
        &diag,
        &rhs,
        &mut x,
        1e-8,
        10 * m,
    );
    if !report.converged {
        return Err(Error::numerical(format!(
            "spatial error solve did not converge in {} iterations (residual {:.2e})",
            report.iterations, report.rel_residual
        )));
    }
    Ok(x)
}

/// Phase-one outcome of the conditional variant.
#[derive(Debug, Clone)]
pub struct ConditionalReport {
    pub rounds: usize,
    /// Relative change of `β̂` in the last round.
    pub beta_change: f64,
    pub map: MapEstimate,
    /// `N x M` estimated spatial errors.
    pub omega: Vec<f64>,
}

fn collect_outcomes(dataset: &RegressionDataset) -> Result<Vec<f64>> {
    let m = dataset.m();
    let mut y = vec![0.0; dataset.n() * m];
    dataset.outcomes.for_each_image(&mut |i, img| {
        y[i * m..(i + 1) * m].copy_from_slice(img);
        Ok(())
    })?;
    Ok(y)
}

fn residualized(y: &[f64], omega: &[f64], n: usize, m: usize) -> Result<InMemoryOutcomes> {
    InMemoryOutcomes::new(y.iter().zip(omega).map(|(a, b)| a - b).collect(), n, m)
}

/// Phase one of the conditional variant: a homoscedastic MAP fit fixes
/// `τ²` and `σ²`, then `β` and the per-image modes of `ω` are maximized in
/// turn.
pub fn conditional_modes(dataset: &RegressionDataset, prior: &SpatialPrior) -> Result<ConditionalReport> {
    let (n, m, p) = (dataset.n(), dataset.m(), dataset.p());
    let y = collect_outcomes(dataset)?;
    let mut omega = vec![0.0; n * m];
    let opts = MapOptions { homoscedastic: true, ..MapOptions::default() };
    let mut map: Option<MapEstimate> = None;
    let mut prev_beta: Option<Vec<f64>> = None;
    let mut rounds = 0;
    let mut change = f64::INFINITY;
    while rounds < 20 {
        rounds += 1;
        let src = residualized(&y, &omega, n, m)?;
        let stats = SufficientStats::from_source(&dataset.design, &src)?;
        let target = WorkingTarget::new(Arc::new(stats), &dataset.design, prior.clone())?;
        // variances come from the first fit only; later rounds maximize
        // over β and ω alone, which keeps σ² from collapsing into ω
        let round_opts = MapOptions { update_variances: rounds == 1, ..opts };
        let est = map_optimize_working(&target, map.as_ref().map(|e| e.state.clone()), round_opts)?;
        let beta = target.beta(&est.state.gamma);
        if let Some(pb) = &prev_beta {
            let num: f64 = beta.iter().zip(pb).map(|(a, b)| (a - b) * (a - b)).sum();
            let den: f64 = pb.iter().map(|b| b * b).sum();
            change = (num / den.max(1e-300)).sqrt();
        }
        let (tau2, sigma2) = (est.state.tau2, est.state.sigma2[0]);
        let design = &dataset.design;
        let solved: Vec<Result<Vec<f64>>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = design.x_row(i);
                let mut r = y[i * m..(i + 1) * m].to_vec();
                for j in 0..p {
                    for s in 0..m {
                        r[s] -= x[j] * beta[j * m + s];
                    }
                }
                solve_omega(&prior.precision, tau2, sigma2, &r, Some(&omega[i * m..(i + 1) * m]))
            })
            .collect();
        for (i, w) in solved.into_iter().enumerate() {
            omega[i * m..(i + 1) * m].copy_from_slice(&w?);
        }
        map = Some(est);
        prev_beta = Some(beta);
        if change < 1e-6 {
            break;
        }
    }
    Ok(ConditionalReport { rounds, beta_change: change, map: map.expect("at least one round"), omega })
}

/// Conditional variant: plug in the modes of `ω`, then run the working
/// sampler on `y - ω̂`.
pub fn fit_conditional(
    dataset: &RegressionDataset,
    prior: &SpatialPrior,
    cfg: &HmcConfig,
) -> Result<(PosteriorDraws, ConditionalReport)> {
    let report = conditional_modes(dataset, prior)?;
    let y = collect_outcomes(dataset)?;
    let src = residualized(&y, &report.omega, dataset.n(), dataset.m())?;
    let stats = SufficientStats::from_source(&dataset.design, &src)?;
    let target = WorkingTarget::new(Arc::new(stats), &dataset.design, prior.clone())?;
    let control = ChainControl { variant: Variant::Conditional, ..ChainControl::default() };
    let draws = sample_target(&target, cfg, &control)?;
    Ok((draws, report))
}
