//! Reference methods scored alongside the spatial model: per-vertex GLM,
//! GLM on pre-smoothed images, the exact-covariance oracle and its
//! low-rank truncation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gp::dense_covariance;
use crate::inference::{DrawsMeta, PosteriorDraws, Variant};
use crate::kernels::CorrelationModel;
use crate::model::{InMemoryOutcomes, OutcomeSource, RegressionDataset};
use crate::sphere::{NeighborIndex, SphericalMesh};
use crate::vecchia::{CovarianceSpec, Nugget};

/// Largest `P·M` handled by the dense comparators.
pub const DENSE_MAX_DIM: usize = 6000;

fn meta(variant: Variant, seed: u64) -> DrawsMeta {
    DrawsMeta { variant, seed, config_hash: 0 }
}

fn xtx(dataset: &RegressionDataset) -> DMatrix<f64> {
    let (n, p) = (dataset.n(), dataset.p());
    let x = DMatrix::from_row_slice(n, p, dataset.design.x());
    x.transpose() * x
}

/// `Xᵀ Y` as `P x M` plus per-vertex sums of squares.
fn cross_products(dataset: &RegressionDataset, source: &dyn OutcomeSource) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (p, m) = (dataset.p(), source.n_vertices());
    let mut xty = DMatrix::zeros(p, m);
    let mut ss = vec![0.0; m];
    source.for_each_image(&mut |i, y| {
        let xi = dataset.design.x_row(i);
        for s in 0..m {
            for j in 0..p {
                xty[(j, s)] += xi[j] * y[s];
            }
            ss[s] += y[s] * y[s];
        }
        Ok(())
    })?;
    Ok((xty, ss))
}

/// Per-vertex conjugate posterior under `p(β, σ²) ∝ σ⁻²`, sampled directly.
pub fn fit_glm(dataset: &RegressionDataset, draws: usize, seed: u64) -> Result<PosteriorDraws> {
    glm_from_source(dataset, dataset.outcomes.as_ref(), draws, seed, Variant::Glm)
}

fn glm_from_source(
    dataset: &RegressionDataset,
    source: &dyn OutcomeSource,
    draws: usize,
    seed: u64,
    variant: Variant,
) -> Result<PosteriorDraws> {
    let (n, p, m) = (dataset.n(), dataset.p(), source.n_vertices());
    if n <= p {
        return Err(Error::data(format!("GLM needs more images than coefficients (N={n}, P={p})")));
    }
    let gram = xtx(dataset);
    let chol = gram.clone().cholesky().ok_or_else(|| Error::data("design is rank deficient"))?;
    let inv_l = chol.l().try_inverse().ok_or_else(|| Error::numerical("singular design factor"))?;
    // β = β̂ + σ L⁻ᵀ z has covariance σ² (XᵀX)⁻¹
    let inv_lt = inv_l.transpose();
    let (xty, ss) = cross_products(dataset, source)?;
    let bhat = chol.solve(&xty);
    let shape = 0.5 * (n - p) as f64;

    let per_vertex: Vec<(Vec<f64>, Vec<f64>)> = (0..m)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let b = bhat.column(s);
            let rss = (ss[s] - b.dot(&xty.column(s))).max(0.0).max(1e-12 * ss[s]).max(f64::MIN_POSITIVE);
            let gamma = Gamma::new(shape, 2.0 / rss).expect("valid gamma");
            let mut beta = Vec::with_capacity(draws * p);
            let mut sig = Vec::with_capacity(draws);
            for _ in 0..draws {
                let sigma2 = 1.0 / gamma.sample(&mut rng);
                let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
                let d = &inv_lt * z * sigma2.sqrt();
                beta.extend((0..p).map(|j| b[j] + d[j]));
                sig.push(sigma2);
            }
            (beta, sig)
        })
        .collect();
    let mut beta = vec![0.0; draws * p * m];
    let mut sigma2 = vec![0.0; draws * m];
    for (s, (b, sg)) in per_vertex.iter().enumerate() {
        for d in 0..draws {
            for j in 0..p {
                beta[d * p * m + j * m + s] = b[d * p + j];
            }
            sigma2[d * m + s] = sg[d];
        }
    }
    let mut out = PosteriorDraws::new(p, m, beta, vec![draws], meta(variant, seed))?;
    out.sigma2 = Some(sigma2);
    Ok(out)
}

/// Row-normalized kernel smoother. Weights below `1e-8` of the peak are
/// dropped so large meshes stay sparse.
#[derive(Debug, Clone)]
pub struct Smoother {
    rows: Vec<Vec<(usize, f64)>>,
}

impl Smoother {
    pub fn new(mesh: &SphericalMesh, kernel: &CorrelationModel) -> Result<Self> {
        let reach = ((1e8f64).ln() / kernel.psi()).powf(1.0 / kernel.nu());
        let index = NeighborIndex::build(mesh, reach.min(std::f64::consts::PI * mesh.radius()))?;
        let rows = (0..mesh.len())
            .into_par_iter()
            .map(|i| {
                let nb = index.neighbors(i);
                let mut row: Vec<(usize, f64)> = vec![(i, 1.0)];
                row.extend(nb.ids.iter().zip(&nb.dists).map(|(&j, &d)| (j, kernel.corr(d))));
                let total: f64 = row.iter().map(|r| r.1).sum();
                row.iter_mut().for_each(|r| r.1 /= total);
                row
            })
            .collect();
        Ok(Smoother { rows })
    }

    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|row| row.iter().map(|(j, w)| w * y[*j]).sum()).collect()
    }
}

/// GLM on images pre-smoothed with `kernel`.
pub fn fit_glm_ps(
    dataset: &RegressionDataset,
    mesh: &SphericalMesh,
    kernel: &CorrelationModel,
    draws: usize,
    seed: u64,
) -> Result<PosteriorDraws> {
    if mesh.len() != dataset.m() {
        return Err(Error::argument("mesh does not match the dataset"));
    }
    let smoother = Smoother::new(mesh, kernel)?;
    let (n, m) = (dataset.n(), dataset.m());
    let mut data = Vec::with_capacity(n * m);
    dataset.outcomes.for_each_image(&mut |_, y| {
        data.extend(smoother.apply(y));
        Ok(())
    })?;
    let smoothed = InMemoryOutcomes::new(data, n, m)?;
    glm_from_source(dataset, &smoothed, draws, seed, Variant::GlmPs)
}

/// Covariance parameters known to the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleParams {
    pub kernel: CorrelationModel,
    /// Spatial noise variance `τ²`.
    pub tau2: f64,
    /// Independent noise variance.
    pub sigma2: f64,
    /// Prior variance of each coefficient field.
    pub beta_variance: Vec<f64>,
}

struct DenseParts {
    /// `Σ_i x_i ⊗ H⁻¹ y_i`, coefficient-major.
    rhs: DVector<f64>,
    /// `XᵀX ⊗ H⁻¹`.
    lik: DMatrix<f64>,
    corr: DMatrix<f64>,
}

fn dense_parts(dataset: &RegressionDataset, mesh: &SphericalMesh, params: &OracleParams) -> Result<DenseParts> {
    let (p, m) = (dataset.p(), dataset.m());
    if p * m > DENSE_MAX_DIM {
        return Err(Error::argument(format!(
            "dense comparators need P·M ≤ {DENSE_MAX_DIM} (got {}); use a smaller disc",
            p * m
        )));
    }
    if params.beta_variance.len() != p || params.beta_variance.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::argument("one positive prior variance per coefficient is required"));
    }
    if mesh.len() != m {
        return Err(Error::argument("mesh does not match the dataset"));
    }
    let corr = dense_covariance(mesh, &CovarianceSpec { kernel: params.kernel, scale: 1.0, nugget: Nugget::None });
    let h = &corr * params.tau2 + DMatrix::identity(m, m) * params.sigma2;
    let hc = h.cholesky().ok_or_else(|| Error::numerical("noise covariance is not positive definite"))?;
    let hinv = hc.inverse();
    let (xty, _) = cross_products(dataset, dataset.outcomes.as_ref())?;
    let gram = xtx(dataset);
    let mut rhs = DVector::zeros(p * m);
    for j in 0..p {
        let v = &hinv * xty.row(j).transpose();
        rhs.rows_mut(j * m, m).copy_from(&v);
    }
    let mut lik = DMatrix::zeros(p * m, p * m);
    for a in 0..p {
        for b in 0..p {
            lik.view_mut((a * m, b * m), (m, m)).copy_from(&(&hinv * gram[(a, b)]));
        }
    }
    Ok(DenseParts { rhs, lik, corr })
}

/// Draws `mean + L⁻ᵀ z` for a precision with lower factor `L`.
fn gaussian_draws(mean: &DVector<f64>, chol_l: &DMatrix<f64>, draws: usize, seed: u64) -> Result<Vec<f64>> {
    let d = mean.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DMatrix::from_fn(d, draws, |_, _| rng.sample::<f64, _>(StandardNormal));
    let lt = chol_l.transpose();
    let x = lt.solve_upper_triangular(&z).ok_or_else(|| Error::numerical("singular posterior factor"))?;
    let mut out = Vec::with_capacity(d * draws);
    for k in 0..draws {
        out.extend(x.column(k).iter().zip(mean.iter()).map(|(a, b)| a + b));
    }
    Ok(out)
}

/// Posterior mean and lower Cholesky factor of the oracle precision
/// `XᵀX ⊗ H⁻¹ + diag(v)⁻¹ ⊗ C⁻¹`.
fn oracle_posterior(
    dataset: &RegressionDataset,
    mesh: &SphericalMesh,
    params: &OracleParams,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (p, m) = (dataset.p(), dataset.m());
    let parts = dense_parts(dataset, mesh, params)?;
    let cc = parts.corr.cholesky().ok_or_else(|| Error::numerical("prior correlation is not positive definite"))?;
    let cinv = cc.inverse();
    let mut q = parts.lik;
    for j in 0..p {
        let mut blk = q.view_mut((j * m, j * m), (m, m));
        blk += &cinv / params.beta_variance[j];
    }
    let qc = q.cholesky().ok_or_else(|| Error::numerical("oracle posterior precision is not positive definite"))?;
    Ok((qc.solve(&parts.rhs), qc.l()))
}

/// Exact Gaussian posterior of all coefficient fields with the true
/// covariance parameters.
pub fn fit_oracle(
    dataset: &RegressionDataset,
    mesh: &SphericalMesh,
    params: &OracleParams,
    draws: usize,
    seed: u64,
) -> Result<PosteriorDraws> {
    let (mean, l) = oracle_posterior(dataset, mesh, params)?;
    let beta = gaussian_draws(&mean, &l, draws, seed)?;
    PosteriorDraws::new(dataset.p(), dataset.m(), beta, vec![draws], meta(Variant::Oracle, seed))
}

/// Posterior mean of the oracle, without sampling.
pub fn oracle_mean(dataset: &RegressionDataset, mesh: &SphericalMesh, params: &OracleParams) -> Result<Vec<f64>> {
    Ok(oracle_posterior(dataset, mesh, params)?.0.iter().copied().collect())
}

/// Result of the low-rank fit with the size of the retained basis.
#[derive(Debug, Clone)]
pub struct LowRankFit {
    pub draws: PosteriorDraws,
    pub rank: usize,
    pub mean: Vec<f64>,
}

/// Oracle posterior restricted to the leading prior eigenvectors that
/// carry at least `fraction` of the prior variance.
pub fn fit_low_rank(
    dataset: &RegressionDataset,
    mesh: &SphericalMesh,
    params: &OracleParams,
    fraction: f64,
    draws: usize,
    seed: u64,
) -> Result<LowRankFit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::argument("variance fraction must lie in (0, 1]"));
    }
    let (p, m) = (dataset.p(), dataset.m());
    let parts = dense_parts(dataset, mesh, params)?;
    let eig = SymmetricEigen::new(parts.corr);
    // eigenpairs of diag(v) ⊗ C are (v_j λ_k, e_j ⊗ u_k)
    let mut pairs: Vec<(f64, usize, usize)> = (0..p)
        .flat_map(|j| (0..m).map(move |k| (j, k)))
        .map(|(j, k)| (params.beta_variance[j] * eig.eigenvalues[k].max(0.0), j, k))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total: f64 = pairs.iter().map(|t| t.0).sum();
    let mut keep = 0;
    let mut acc = 0.0;
    for t in &pairs {
        if acc >= fraction * total * (1.0 - 1e-12) && fraction < 1.0 {
            break;
        }
        if t.0 <= 0.0 {
            break;
        }
        acc += t.0;
        keep += 1;
    }
    let pairs = &pairs[..keep];
    let mut phi = DMatrix::zeros(p * m, keep);
    for (c, &(_, j, k)) in pairs.iter().enumerate() {
        phi.view_mut((j * m, c), (m, 1)).copy_from(&eig.eigenvectors.column(k));
    }
    let mut q = phi.transpose() * &parts.lik * &phi;
    for (c, t) in pairs.iter().enumerate() {
        q[(c, c)] += 1.0 / t.0;
    }
    let rhs = phi.transpose() * &parts.rhs;
    let qc = q.cholesky().ok_or_else(|| Error::numerical("low-rank posterior precision is not positive definite"))?;
    let amean = qc.solve(&rhs);
    let a = gaussian_draws(&amean, &qc.l(), draws, seed)?;
    let a = DMatrix::from_column_slice(keep, draws, &a);
    let beta = &phi * a;
    let mean: Vec<f64> = (&phi * amean).iter().copied().collect();
    let draws = PosteriorDraws::new(p, m, beta.as_slice().to_vec(), vec![draws], meta(Variant::LowRank, seed))?;
    Ok(LowRankFit { draws, rank: keep, mean })
}
