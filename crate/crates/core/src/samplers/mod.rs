//! Posterior computation for the working, marginal and conditional
//! variants: the log-posterior target and its gradient, the Kronecker
//! prior mass matrix, HMC, Gibbs updates and MAP optimization.

mod fit;
mod gibbs;
mod hmc;
mod map;

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels::CorrelationModel;
use crate::linalg::{cholesky_in_place, cholesky_solve};
use crate::model::{ChainState, Design, SufficientStats};
use crate::sphere::{NeighborIndex, SphericalMesh};
use crate::vecchia::{CovarianceSpec, VecchiaOptions, VecchiaPrecision};

pub use fit::{
    conditional_modes, fit_conditional, fit_marginal, fit_working, marginal_covariance, run_chain, sill_variances,
    solve_omega, ChainControl, ConditionalReport, MarginalPlan, UpdateFlags,
};
pub use gibbs::{gibbs_update_variances, noise_floor, sample_sigma_precisions, GammaShapes};
pub use hmc::{find_initial_step, hmc_step, leapfrog_trajectory, DualAveraging, HmcConfig, StepOutcome};
pub use map::{map_optimize_working, MapEstimate, MapOptions};

/// Default radius of the prior Vecchia approximation (mm).
pub const DEFAULT_PRIOR_RADIUS_MM: f64 = 8.0;
/// Default radius of the mass-matrix Vecchia approximation (mm).
pub const DEFAULT_MASS_RADIUS_MM: f64 = 3.0;

/// GP prior on the coefficient fields: mesh, kernel and the two sparse
/// precisions (one for the log prior, one for the HMC metric).
#[derive(Debug, Clone)]
pub struct SpatialPrior {
    pub mesh: Arc<SphericalMesh>,
    pub kernel: CorrelationModel,
    pub index: Arc<NeighborIndex>,
    pub precision: Arc<VecchiaPrecision>,
    pub mass: Arc<VecchiaPrecision>,
}

impl SpatialPrior {
    pub fn new(
        mesh: Arc<SphericalMesh>,
        kernel: CorrelationModel,
        prior_radius: f64,
        mass_radius: f64,
    ) -> Result<Self> {
        Self::with_options(mesh, kernel, prior_radius, mass_radius, VecchiaOptions::default())
    }

    pub fn with_options(
        mesh: Arc<SphericalMesh>,
        kernel: CorrelationModel,
        prior_radius: f64,
        mass_radius: f64,
        opts: VecchiaOptions,
    ) -> Result<Self> {
        let index = NeighborIndex::build(&mesh, prior_radius)?;
        let spec = CovarianceSpec::correlation(kernel);
        let precision = VecchiaPrecision::build_with(&mesh, &index, &spec, opts)?;
        let mass = if (mass_radius - prior_radius).abs() < 1e-12 {
            precision.clone()
        } else {
            let mi = NeighborIndex::build(&mesh, mass_radius)?;
            VecchiaPrecision::build_with(&mesh, &mi, &spec, opts)?
        };
        Ok(SpatialPrior { mesh, kernel, index: Arc::new(index), precision: Arc::new(precision), mass: Arc::new(mass) })
    }

    /// Prior with explicitly supplied precisions (e.g. identity for GLM limits).
    pub fn from_parts(
        mesh: Arc<SphericalMesh>,
        kernel: CorrelationModel,
        index: Arc<NeighborIndex>,
        precision: Arc<VecchiaPrecision>,
        mass: Arc<VecchiaPrecision>,
    ) -> Result<Self> {
        if precision.len() != mesh.len() || mass.len() != mesh.len() {
            return Err(Error::argument("prior precisions do not match the mesh"));
        }
        Ok(SpatialPrior { mesh, kernel, index, precision, mass })
    }

    pub fn m(&self) -> usize {
        self.mesh.len()
    }
}

/// Error covariance used by the likelihood.
#[derive(Debug, Clone)]
pub enum NoiseModel {
    /// Independent errors with the chain's current `sigma2(s)`.
    Diagonal,
    /// Fixed correlated error covariance `H̃` (marginal variant).
    Correlated(Arc<VecchiaPrecision>),
}

/// Everything the HMC target needs besides the chain state.
#[derive(Debug, Clone)]
pub struct WorkingTarget {
    pub stats: Arc<SufficientStats>,
    /// `P x rank`, row-major.
    pub v: Vec<f64>,
    pub p: usize,
    pub prior: SpatialPrior,
    pub noise: NoiseModel,
    /// Multiplies the likelihood; 1 for inference, 0 isolates the prior.
    pub data_weight: f64,
}

impl WorkingTarget {
    pub fn new(stats: Arc<SufficientStats>, design: &Design, prior: SpatialPrior) -> Result<Self> {
        if stats.m() != prior.m() {
            return Err(Error::argument(format!(
                "statistics cover {} vertices, prior covers {}",
                stats.m(),
                prior.m()
            )));
        }
        if stats.rank() != design.rank() {
            return Err(Error::argument("statistics and design disagree on rank"));
        }
        Ok(WorkingTarget {
            stats,
            v: design.v().to_vec(),
            p: design.p(),
            prior,
            noise: NoiseModel::Diagonal,
            data_weight: 1.0,
        })
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Self {
        self.noise = noise;
        self
    }

    pub fn rank(&self) -> usize {
        self.stats.rank()
    }

    pub fn m(&self) -> usize {
        self.stats.m()
    }

    /// `β = (V ⊗ I) γ`.
    pub fn beta(&self, gamma: &[f64]) -> Vec<f64> {
        let (k, m) = (self.rank(), self.m());
        let mut beta = vec![0.0; self.p * m];
        for j in 0..self.p {
            for c in 0..k {
                let w = self.v[j * k + c];
                for s in 0..m {
                    beta[j * m + s] += w * gamma[c * m + s];
                }
            }
        }
        beta
    }

    /// `Vᵀ diag(1/ζ²) V`.
    pub fn prior_mix(&self, zeta2: &[f64]) -> Vec<f64> {
        let k = self.rank();
        let mut g = vec![0.0; k * k];
        for a in 0..k {
            for b in 0..k {
                g[a * k + b] = (0..self.p).map(|j| self.v[j * k + a] * self.v[j * k + b] / zeta2[j]).sum();
            }
        }
        g
    }

    fn check(&self, state: &ChainState) -> Result<()> {
        if state.gamma.len() != self.rank() * self.m() {
            return Err(Error::argument(format!(
                "gamma has {} entries, expected {}",
                state.gamma.len(),
                self.rank() * self.m()
            )));
        }
        if state.zeta2.len() != self.p || state.sigma2.len() != self.m() {
            return Err(Error::argument("state dimensions do not match the target"));
        }
        Ok(())
    }

    /// Potential `U(γ) = -log likelihood - log prior` and its gradient.
    pub fn potential_and_gradient(&self, state: &ChainState) -> Result<(f64, Vec<f64>)> {
        self.check(state)?;
        let mix = self.prior_mix(&state.zeta2);
        let mut grad = vec![0.0; state.gamma.len()];
        let mut scratch = Scratch::new(self.m());
        let u = self.potential_grad_into(&state.gamma, state, &mix, &mut grad, &mut scratch);
        Ok((u, grad))
    }

    /// Allocation-free inner evaluation; `mix` is [`prior_mix`](Self::prior_mix).
    pub(crate) fn potential_grad_into(
        &self,
        gamma: &[f64],
        state: &ChainState,
        mix: &[f64],
        grad: &mut [f64],
        scratch: &mut Scratch,
    ) -> f64 {
        let (k, m) = (self.rank(), self.m());
        let d = self.stats.singular_values();
        let proj = self.stats.projected();
        let tau_inv = 1.0 / state.tau2;
        grad.iter_mut().for_each(|g| *g = 0.0);

        // prior: ½ τ⁻² Σ_{c,l} mix[c,l] γ_cᵀ C̃⁻¹ γ_l
        let mut u = 0.0;
        for l in 0..k {
            self.prior.precision.apply_precision_into(&gamma[l * m..(l + 1) * m], &mut scratch.a);
            for c in 0..k {
                let w = tau_inv * mix[c * k + l];
                if w == 0.0 {
                    continue;
                }
                let gc = &mut grad[c * m..(c + 1) * m];
                for s in 0..m {
                    gc[s] += w * scratch.a[s];
                }
            }
        }
        for (g, x) in grad.iter().zip(gamma) {
            u += 0.5 * g * x;
        }
        if self.data_weight == 0.0 {
            return u;
        }
        let wt = self.data_weight;
        match &self.noise {
            NoiseModel::Diagonal => {
                let n_half = 0.5 * self.stats.n_images() as f64;
                let sumsq = self.stats.sumsq();
                let mut lik = 0.0;
                for s in 0..m {
                    let inv = 1.0 / state.sigma2[s];
                    let mut q = sumsq[s];
                    for c in 0..k {
                        let g = gamma[c * m + s];
                        let pj = proj[c * m + s];
                        q += d[c] * g * (d[c] * g - 2.0 * pj);
                        grad[c * m + s] += wt * inv * d[c] * (d[c] * g - pj);
                    }
                    lik += 0.5 * q.max(0.0) * inv + n_half * state.sigma2[s].ln();
                }
                u += wt * lik;
            }
            NoiseModel::Correlated(h) => {
                let mut lik = 0.0;
                for c in 0..k {
                    for s in 0..m {
                        scratch.b[s] = d[c] * (d[c] * gamma[c * m + s] - proj[c * m + s]);
                    }
                    h.apply_precision_into(&scratch.b, &mut scratch.a);
                    let gc = &gamma[c * m..(c + 1) * m];
                    let pc = &proj[c * m..(c + 1) * m];
                    // ½ d² γᵀH⁻¹γ - d γᵀH⁻¹proj, from (d² γ - d proj)ᵀ H⁻¹ applied
                    for s in 0..m {
                        grad[c * m + s] += wt * scratch.a[s];
                    }
                    // value: ½ (dγ - proj)ᵀ H⁻¹ (dγ - proj) up to a γ-free constant
                    for s in 0..m {
                        scratch.b[s] = d[c] * gc[s] - pc[s];
                    }
                    lik += 0.5 * h.quad_form_unchecked(&scratch.b);
                }
                u += wt * lik;
            }
        }
        u
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Scratch {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl Scratch {
    pub fn new(m: usize) -> Self {
        Scratch { a: vec![0.0; m], b: vec![0.0; m] }
    }
}

/// HMC metric `Vᵀ Z⁻¹ V ⊗ τ⁻² C̃_M⁻¹`.
#[derive(Debug, Clone)]
pub struct MassMatrix {
    vp: Arc<VecchiaPrecision>,
    k: usize,
    mix: Vec<f64>,
    mix_chol: Vec<f64>,
    tau2: f64,
}

impl MassMatrix {
    pub fn new(vp: Arc<VecchiaPrecision>, mix: Vec<f64>, tau2: f64) -> Result<Self> {
        let k = (mix.len() as f64).sqrt().round() as usize;
        if k * k != mix.len() || k == 0 {
            return Err(Error::argument("mixing matrix must be square"));
        }
        if !(tau2 > 0.0) {
            return Err(Error::State("tau2 must be positive".into()));
        }
        let mut mix_chol = mix.clone();
        if !cholesky_in_place(&mut mix_chol, k) {
            return Err(Error::State("rotated prior scale matrix is not positive definite".into()));
        }
        Ok(MassMatrix { vp, k, mix, mix_chol, tau2 })
    }

    /// Mass for the current variance components of `state`.
    pub fn for_state(target: &WorkingTarget, state: &ChainState) -> Result<Self> {
        Self::new(target.prior.mass.clone(), target.prior_mix(&state.zeta2), state.tau2)
    }

    pub fn dim(&self) -> usize {
        self.k * self.vp.len()
    }

    /// `Mass · p`.
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        let (k, m) = (self.k, self.vp.len());
        let mut out = vec![0.0; p.len()];
        let mut tmp = vec![0.0; m];
        for l in 0..k {
            self.vp.apply_precision_into(&p[l * m..(l + 1) * m], &mut tmp);
            for c in 0..k {
                let w = self.mix[c * k + l] / self.tau2;
                for s in 0..m {
                    out[c * m + s] += w * tmp[s];
                }
            }
        }
        out
    }

    /// `Mass⁻¹ · p` into `out`.
    pub fn apply_inverse_into(&self, p: &[f64], out: &mut [f64]) {
        let (k, m) = (self.k, self.vp.len());
        out.copy_from_slice(p);
        for c in 0..k {
            self.vp.apply_covariance_in_place(&mut out[c * m..(c + 1) * m]);
        }
        if k > 1 {
            let mut col = vec![0.0; k];
            for s in 0..m {
                for c in 0..k {
                    col[c] = out[c * m + s];
                }
                cholesky_solve(&self.mix_chol, k, &mut col);
                for c in 0..k {
                    out[c * m + s] = col[c];
                }
            }
        } else {
            let inv = 1.0 / self.mix[0];
            out.iter_mut().for_each(|v| *v *= inv);
        }
        out.iter_mut().for_each(|v| *v *= self.tau2);
    }

    pub fn apply_inverse(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; p.len()];
        self.apply_inverse_into(p, &mut out);
        out
    }

    /// Draws `p ~ N(0, Mass)` into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let (k, m) = (self.k, self.vp.len());
        let mut fields = vec![0.0; k * m];
        let mut eps = vec![0.0; m];
        for l in 0..k {
            eps.iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
            self.vp.precision_sqrt_apply(&eps, &mut fields[l * m..(l + 1) * m]);
        }
        let scale = 1.0 / self.tau2.sqrt();
        out.iter_mut().for_each(|o| *o = 0.0);
        for c in 0..k {
            for l in 0..=c {
                let w = scale * self.mix_chol[c * k + l];
                for s in 0..m {
                    out[c * m + s] += w * fields[l * m + s];
                }
            }
        }
    }
}
