//! Empirical-Bayes estimation of the kernel parameters, `τ²` and a
//! homogeneous noise variance from a surrogate intercept-only model.

mod optim;

use std::collections::BTreeMap;

use rayon::prelude::*;

pub use optim::{maximize_box, OptimOptions, OptimResult};

use crate::error::{Error, Result};
use crate::kernels::CorrelationModel;
use crate::sphere::{NeighborIndex, SphericalMesh};
use crate::vecchia::{CovarianceSpec, Nugget, VecchiaOptions, VecchiaPrecision};

/// Parameters of the surrogate model `τ²C(·; ψ, ν) + σ₀² I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub psi: f64,
    pub nu: f64,
    pub tau2: f64,
    pub sigma2_0: f64,
}

impl HyperParams {
    pub fn kernel(&self) -> Result<CorrelationModel> {
        CorrelationModel::new(self.psi, self.nu)
    }
}

/// Mean-centers each image of an `N x M` buffer in place.
pub fn center_images(images: &mut [f64], m: usize) {
    for img in images.chunks_mut(m) {
        let mu = img.iter().sum::<f64>() / m as f64;
        img.iter_mut().for_each(|v| *v -= mu);
    }
}

/// Vecchia log-likelihood of independent images under the surrogate
/// covariance, constants dropped. Returns `-inf` when the factorization fails.
pub fn surrogate_loglik(images: &[f64], mesh: &SphericalMesh, index: &NeighborIndex, params: &HyperParams) -> f64 {
    surrogate_loglik_with(images, mesh, index, params, VecchiaOptions::default())
}

pub fn surrogate_loglik_with(
    images: &[f64],
    mesh: &SphericalMesh,
    index: &NeighborIndex,
    params: &HyperParams,
    opts: VecchiaOptions,
) -> f64 {
    let m = mesh.len();
    if m == 0 || images.len() % m != 0 {
        return f64::NEG_INFINITY;
    }
    let kernel = match params.kernel() {
        Ok(k) => k,
        Err(_) => return f64::NEG_INFINITY,
    };
    if !(params.tau2 >= 0.0 && params.sigma2_0 >= 0.0) {
        return f64::NEG_INFINITY;
    }
    let spec = CovarianceSpec { kernel, scale: params.tau2, nugget: Nugget::Constant(params.sigma2_0) };
    let vp = match VecchiaPrecision::build_with(mesh, index, &spec, opts) {
        Ok(v) => v,
        Err(_) => return f64::NEG_INFINITY,
    };
    let n = images.len() / m;
    let quad: f64 = images.par_chunks(m).map(|y| vp.quad_form_unchecked(y)).sum();
    let v = -0.5 * n as f64 * vp.log_det() - 0.5 * quad;
    if v.is_finite() {
        v
    } else {
        f64::NEG_INFINITY
    }
}

/// Search box. `nu` lives in `[nu_min, nu_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperBounds {
    pub psi: (f64, f64),
    pub nu: (f64, f64),
    pub tau2: (f64, f64),
    pub sigma2_0: (f64, f64),
}

impl Default for HyperBounds {
    fn default() -> Self {
        HyperBounds { psi: (1e-4, 10.0), nu: (0.2, 2.0), tau2: (1e-8, 1e4), sigma2_0: (1e-8, 1e4) }
    }
}

impl HyperBounds {
    fn contains(&self, p: &HyperParams) -> bool {
        let inside = |v: f64, (l, h): (f64, f64)| v >= l && v <= h;
        inside(p.psi, self.psi)
            && inside(p.nu, self.nu)
            && inside(p.tau2, self.tau2)
            && inside(p.sigma2_0, self.sigma2_0)
    }
}

const LOGIT_CLIP: f64 = 12.0;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Map between parameters and the unconstrained-like search space.
struct Transform {
    bounds: HyperBounds,
    fixed_kernel: Option<CorrelationModel>,
}

impl Transform {
    fn nu_to(&self, nu: f64) -> f64 {
        let (l, h) = self.bounds.nu;
        logit(((nu - l) / (h - l)).clamp(1e-300, 1.0)).clamp(-LOGIT_CLIP, LOGIT_CLIP)
    }

    fn nu_from(&self, u: f64) -> f64 {
        let (l, h) = self.bounds.nu;
        (l + (h - l) * expit(u)).clamp(l, h)
    }

    fn to_space(&self, p: &HyperParams) -> Vec<f64> {
        match self.fixed_kernel {
            Some(_) => vec![p.tau2.ln(), p.sigma2_0.ln()],
            None => vec![p.psi.ln(), self.nu_to(p.nu), p.tau2.ln(), p.sigma2_0.ln()],
        }
    }

    fn from_space(&self, u: &[f64]) -> HyperParams {
        let b = &self.bounds;
        let cl = |v: f64, (l, h): (f64, f64)| v.clamp(l, h);
        match self.fixed_kernel {
            Some(k) => HyperParams {
                psi: k.psi(),
                nu: k.nu(),
                tau2: cl(u[0].exp(), b.tau2),
                sigma2_0: cl(u[1].exp(), b.sigma2_0),
            },
            None => HyperParams {
                psi: cl(u[0].exp(), b.psi),
                nu: self.nu_from(u[1]),
                tau2: cl(u[2].exp(), b.tau2),
                sigma2_0: cl(u[3].exp(), b.sigma2_0),
            },
        }
    }

    fn box_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let b = &self.bounds;
        let tail = [(b.tau2.0.ln(), b.tau2.1.ln()), (b.sigma2_0.0.ln(), b.sigma2_0.1.ln())];
        let mut pairs = Vec::new();
        if self.fixed_kernel.is_none() {
            pairs.push((b.psi.0.ln(), b.psi.1.ln()));
            pairs.push((self.nu_to(b.nu.0), self.nu_to(b.nu.1)));
        }
        pairs.extend(tail);
        pairs.into_iter().unzip()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperOptions {
    pub bounds: HyperBounds,
    /// Starting point; defaults derived from the data when `None`.
    pub start: Option<HyperParams>,
    /// Keep `(ψ, ν)` fixed and estimate only the variances.
    pub fixed_kernel: Option<CorrelationModel>,
    pub optim: OptimOptions,
    pub vecchia: VecchiaOptions,
}

impl Default for HyperOptions {
    fn default() -> Self {
        HyperOptions {
            bounds: HyperBounds::default(),
            start: None,
            fixed_kernel: None,
            optim: OptimOptions::default(),
            vecchia: VecchiaOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperEstimate {
    pub params: HyperParams,
    pub objective: f64,
    pub start_objective: f64,
    pub evaluations: usize,
    pub converged: bool,
}

impl HyperEstimate {
    pub fn kernel(&self) -> Result<CorrelationModel> {
        self.params.kernel()
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let p = &self.params;
        let mut m = BTreeMap::new();
        m.insert("kernel.family".into(), "rbf".into());
        m.insert("kernel.psi".into(), format!("{:.17e}", p.psi));
        m.insert("kernel.nu".into(), format!("{:.17e}", p.nu));
        m.insert("tau2".into(), format!("{:.17e}", p.tau2));
        m.insert("sigma2_0".into(), format!("{:.17e}", p.sigma2_0));
        m.insert("objective".into(), format!("{:.17e}", self.objective));
        m.insert("start_objective".into(), format!("{:.17e}", self.start_objective));
        m.insert("evaluations".into(), self.evaluations.to_string());
        m.insert("converged".into(), self.converged.to_string());
        m
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let num = |k: &str| -> Result<f64> {
            map.get(k)
                .ok_or_else(|| Error::Format(format!("hyperparameter file lacks '{k}'")))?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("bad value for '{k}': {e}")))
        };
        let params = HyperParams {
            psi: num("kernel.psi")?,
            nu: num("kernel.nu")?,
            tau2: num("tau2")?,
            sigma2_0: num("sigma2_0")?,
        };
        params.kernel()?;
        Ok(HyperEstimate {
            params,
            objective: num("objective")?,
            start_objective: num("start_objective").unwrap_or(f64::NAN),
            evaluations: num("evaluations").map(|v| v as usize).unwrap_or(0),
            converged: map.get("converged").map(|v| v == "true").unwrap_or(false),
        })
    }
}

/// Default start: ν = 1.5, FWHM = 6 mm, `τ² = σ₀²` = half the pooled variance.
pub fn default_start(images: &[f64]) -> Result<HyperParams> {
    let n = images.len().max(1) as f64;
    let mean = images.iter().sum::<f64>() / n;
    let var = images.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let k = CorrelationModel::from_fwhm(6.0, 1.5)?;
    let half = (0.5 * var).max(1e-6);
    Ok(HyperParams { psi: k.psi(), nu: k.nu(), tau2: half, sigma2_0: half })
}

/// Maximizes the surrogate likelihood over `(ψ, ν, τ², σ₀²)`. Images are
/// mean-centered here; `images` is `N x M`.
pub fn estimate_hyper(
    images: &[f64],
    mesh: &SphericalMesh,
    index: &NeighborIndex,
    opts: &HyperOptions,
) -> Result<HyperEstimate> {
    let m = mesh.len();
    if m == 0 || images.is_empty() || images.len() % m != 0 {
        return Err(Error::argument("images must be a non-empty N x M buffer"));
    }
    let mut y = images.to_vec();
    center_images(&mut y, m);
    let mut start = match opts.start {
        Some(s) => s,
        None => default_start(&y)?,
    };
    if let Some(k) = opts.fixed_kernel {
        start.psi = k.psi();
        start.nu = k.nu();
    }
    if !opts.bounds.contains(&start) {
        return Err(Error::argument(format!("start {start:?} lies outside the search bounds")));
    }
    let tr = Transform { bounds: opts.bounds, fixed_kernel: opts.fixed_kernel };
    let f = |p: &HyperParams| surrogate_loglik_with(&y, mesh, index, p, opts.vecchia);
    let start_objective = f(&start);
    if !start_objective.is_finite() {
        return Err(Error::argument("surrogate likelihood is infeasible at the start point"));
    }
    let (lo, hi) = tr.box_bounds();
    let u0 = tr.to_space(&start);
    let res = maximize_box(|u| f(&tr.from_space(u)), &u0, &lo, &hi, opts.optim);
    let params = tr.from_space(&res.x);
    let objective = f(&params);
    if !objective.is_finite() {
        return Err(Error::numerical("surrogate likelihood optimization ended at an infeasible point"));
    }
    debug_assert!(objective >= start_objective);
    log::info!(
        "hyperparameters: psi={:.4} nu={:.3} tau2={:.4} sigma2_0={:.4} (fwhm {:.2} mm, {} evaluations)",
        params.psi,
        params.nu,
        params.tau2,
        params.sigma2_0,
        params.kernel().map(|k| k.fwhm()).unwrap_or(f64::NAN),
        res.evaluations
    );
    Ok(HyperEstimate { params, objective, start_objective, evaluations: res.evaluations, converged: res.converged })
}
