use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gp::DenseGp;
use crate::kernels::CorrelationModel;
use crate::model::{Design, InMemoryOutcomes, RegressionDataset};
use crate::sphere::{fibonacci_count_for_spacing, fibonacci_sphere, NeighborIndex, SphericalMesh};
use crate::vecchia::{CovarianceSpec, Nugget, VecchiaOptions, VecchiaPrecision};

/// Truth fields are drawn exactly up to this many vertices.
pub const DENSE_TRUTH_MAX: usize = 2500;
/// Vecchia radius for truth draws on larger discs (mm).
pub const TRUTH_RADIUS_MM: f64 = 16.0;

/// Signal-to-noise setting of the simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Snr {
    Low,
    High,
}

impl Snr {
    /// `(τ², σ²)` of the spatial and independent noise.
    pub fn variances(self) -> (f64, f64) {
        match self {
            Snr::Low => (1.75, 1.25),
            Snr::High => (0.23, 0.07),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Snr::Low => "low",
            Snr::High => "high",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "low" | "4" | "4%" => Ok(Snr::Low),
            "high" | "40" | "40%" => Ok(Snr::High),
            other => Err(Error::argument(format!("unknown snr setting '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub vertices: usize,
    /// Target spacing of the underlying sphere points (mm).
    pub spacing_mm: f64,
    pub radius_mm: f64,
    pub truth_kernel: CorrelationModel,
    pub beta_variance: f64,
    pub threshold: f64,
    /// Coefficients including the intercept.
    pub p: usize,
    pub covariate_corr: f64,
    pub snr: Snr,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            vertices: 2000,
            spacing_mm: 2.0,
            radius_mm: 100.0,
            truth_kernel: CorrelationModel::from_fwhm(6.0, 1.0).expect("valid default kernel"),
            beta_variance: 0.04,
            threshold: 0.08,
            p: 3,
            covariate_corr: 0.5,
            snr: Snr::Low,
            n: 500,
            replicates: 50,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vertices == 0 || self.p == 0 || self.n == 0 {
            return Err(Error::argument("vertices, p and n must be positive"));
        }
        if !(self.beta_variance > 0.0 && self.spacing_mm > 0.0 && self.radius_mm > 0.0) {
            return Err(Error::argument("variances and lengths must be positive"));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::argument("threshold must be non-negative"));
        }
        // shared-factor construction: equicorrelation must be non-negative
        if !(self.covariate_corr >= 0.0 && self.covariate_corr < 1.0) {
            return Err(Error::argument("covariate correlation must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Spatial SNR: coefficient signal variance over total noise variance.
    pub fn snr_ratio(&self) -> f64 {
        let (t, s) = self.snr.variances();
        self.p as f64 * self.beta_variance / (t + s)
    }

    pub fn r_squared(&self) -> f64 {
        let (t, s) = self.snr.variances();
        let signal = self.p as f64 * self.beta_variance;
        signal / (signal + t + s)
    }

    /// Expected fraction of exact zeros in each coefficient field.
    pub fn expected_sparsity(&self) -> f64 {
        use statrs::distribution::{ContinuousCDF, Normal};
        let z = self.threshold / self.beta_variance.sqrt();
        2.0 * Normal::standard().cdf(z) - 1.0
    }
}

/// Disc of `cfg.vertices` points nearest to one vertex of a Fibonacci
/// sphere with roughly `cfg.spacing_mm` spacing.
pub fn build_disc_mesh(cfg: &SimConfig) -> Result<SphericalMesh> {
    let count = fibonacci_count_for_spacing(cfg.radius_mm, cfg.spacing_mm).max(cfg.vertices);
    let sphere = fibonacci_sphere(count, cfg.radius_mm)?;
    let idx = sphere.nearest_disc(0, cfg.vertices)?;
    sphere.submesh(&idx)
}

/// Draws independent zero-mean GP fields with covariance `spec`.
pub enum FieldSampler {
    Dense(DenseGp),
    Vecchia(VecchiaPrecision),
}

impl FieldSampler {
    pub fn new(mesh: &SphericalMesh, spec: &CovarianceSpec) -> Result<Self> {
        if mesh.len() <= DENSE_TRUTH_MAX {
            Ok(FieldSampler::Dense(DenseGp::new(mesh, spec)?))
        } else {
            let index = NeighborIndex::build(mesh, TRUTH_RADIUS_MM)?;
            Ok(FieldSampler::Vecchia(VecchiaPrecision::build_with(mesh, &index, spec, VecchiaOptions::default())?))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        match self {
            FieldSampler::Dense(g) => Ok(g.sample(rng)),
            FieldSampler::Vecchia(v) => v.sample_gp(1.0, rng),
        }
    }
}

/// One simulated replicate.
#[derive(Debug, Clone)]
pub struct SimData {
    /// Thresholded truth, `P x M`.
    pub beta: Vec<f64>,
    /// Unthresholded draws, `P x M`.
    pub beta_tilde: Vec<f64>,
    /// Design including the intercept column, row-major `N x P`.
    pub x: Vec<f64>,
    /// Images, row-major `N x M`.
    pub y: Vec<f64>,
    pub n: usize,
    pub m: usize,
    pub p: usize,
}

impl SimData {
    pub fn dataset(&self) -> Result<RegressionDataset> {
        let design = Design::factorize(&self.x, self.n, self.p)?;
        RegressionDataset::new(design, Arc::new(InMemoryOutcomes::new(self.y.clone(), self.n, self.m)?))
    }

    pub fn nonzero(&self) -> Vec<bool> {
        self.beta.iter().map(|b| *b != 0.0).collect()
    }
}

/// Generates truth, covariates and images for one replicate.
pub fn simulate_dataset<R: Rng + ?Sized>(cfg: &SimConfig, mesh: &SphericalMesh, rng: &mut R) -> Result<SimData> {
    cfg.validate()?;
    let (m, n, p) = (mesh.len(), cfg.n, cfg.p);
    if m != cfg.vertices {
        return Err(Error::argument(format!("mesh has {m} vertices, config asks for {}", cfg.vertices)));
    }
    let corr = FieldSampler::new(mesh, &CovarianceSpec { kernel: cfg.truth_kernel, scale: 1.0, nugget: Nugget::None })?;
    let bsd = cfg.beta_variance.sqrt();
    let mut beta_tilde = Vec::with_capacity(p * m);
    for _ in 0..p {
        beta_tilde.extend(corr.sample(rng)?.into_iter().map(|v| bsd * v));
    }
    let beta: Vec<f64> = beta_tilde.iter().map(|b| if b.abs() > cfg.threshold { *b } else { 0.0 }).collect();

    // intercept plus equicorrelated unit-variance covariates
    let rho = cfg.covariate_corr;
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    let mut x = Vec::with_capacity(n * p);
    for _ in 0..n {
        x.push(1.0);
        let shared: f64 = rng.sample(StandardNormal);
        for _ in 1..p {
            let own: f64 = rng.sample(StandardNormal);
            x.push(a * shared + b * own);
        }
    }

    let (tau2, sigma2) = cfg.snr.variances();
    let (tsd, ssd) = (tau2.sqrt(), sigma2.sqrt());
    let mut y = vec![0.0; n * m];
    for i in 0..n {
        let omega = corr.sample(rng)?;
        let xi = &x[i * p..(i + 1) * p];
        let row = &mut y[i * m..(i + 1) * m];
        for s in 0..m {
            let mu: f64 = (0..p).map(|j| xi[j] * beta[j * m + s]).sum();
            let e: f64 = rng.sample(StandardNormal);
            row[s] = mu + tsd * omega[s] + ssd * e;
        }
    }
    Ok(SimData { beta, beta_tilde, x, y, n, m, p })
}
