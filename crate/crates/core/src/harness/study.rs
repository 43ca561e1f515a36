use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::comparators::{fit_glm, fit_glm_ps, fit_low_rank, fit_oracle, OracleParams};
use super::sim::{build_disc_mesh, simulate_dataset, SimConfig, SimData, Snr};
use crate::error::{Error, Result};
use crate::hyperparam::{estimate_hyper, HyperEstimate, HyperOptions};
use crate::inference::{decide_nonzero, mcc, mrse, pointwise_intervals, simultaneous_band, PosteriorDraws, Variant};
use crate::kernels::CorrelationModel;
use crate::samplers::{
    fit_conditional, fit_marginal, fit_working, HmcConfig, MarginalPlan, SpatialPrior, DEFAULT_MASS_RADIUS_MM,
    DEFAULT_PRIOR_RADIUS_MM,
};
use crate::sphere::{NeighborIndex, SphericalMesh};

/// Accuracy of one fit against the simulated truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    /// Percent.
    pub mrse: f64,
    /// Fraction of coefficient-vertex pairs inside their 95% interval.
    pub ci95: f64,
    /// Fraction of coefficient fields lying entirely inside their 80% band.
    pub cb80: f64,
    /// Fraction of coefficient-vertex pairs inside their 80% band.
    pub cb80_vertex: f64,
    /// MCC of band-based nonzero decisions.
    pub mcc: f64,
    /// Every band decision is also a pointwise decision at the same level.
    pub band_subset: bool,
}

/// Scores draws against the true `P x M` field.
pub fn score_draws(draws: &PosteriorDraws, truth: &[f64]) -> Result<Score> {
    let (p, m) = (draws.p(), draws.m());
    if truth.len() != p * m {
        return Err(Error::argument("truth does not match the draws"));
    }
    let mean = draws.mean();
    let ci = pointwise_intervals(draws, 0.95)?;
    let pw80 = pointwise_intervals(draws, 0.8)?.excludes_zero();
    let mut inside = 0usize;
    let mut vertex_inside = 0usize;
    let mut decisions = Vec::with_capacity(p * m);
    let mut subset = true;
    for j in 0..p {
        let band = simultaneous_band(draws, j, 0.8)?;
        if band.contains(&truth[j * m..(j + 1) * m]) {
            inside += 1;
        }
        vertex_inside += band.count_inside(&truth[j * m..(j + 1) * m]);
        let dec = decide_nonzero(&band);
        subset &= dec.iter().zip(&pw80[j * m..(j + 1) * m]).all(|(b, q)| !*b || *q);
        decisions.extend(dec);
    }
    let nonzero: Vec<bool> = truth.iter().map(|b| *b != 0.0).collect();
    Ok(Score {
        mrse: mrse(&mean, truth)?,
        ci95: ci.coverage(truth),
        cb80: inside as f64 / p as f64,
        cb80_vertex: vertex_inside as f64 / (p * m) as f64,
        mcc: mcc(&decisions, &nonzero)?,
        band_subset: subset,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOptions {
    pub methods: Vec<Variant>,
    pub hmc: HmcConfig,
    pub prior_radius_mm: f64,
    pub mass_radius_mm: f64,
    /// Draws taken by the closed-form comparators.
    pub direct_draws: usize,
    pub low_rank_fraction: f64,
    /// Smoothing kernel of GLM-PS.
    pub smoother: CorrelationModel,
    pub hyper: HyperOptions,
    /// Neighbor radius of the surrogate likelihood (mm).
    pub hyper_radius_mm: f64,
    /// Run replicates concurrently.
    pub parallel_replicates: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            methods: vec![
                Variant::Working,
                Variant::Marginal,
                Variant::Conditional,
                Variant::Glm,
                Variant::GlmPs,
                Variant::Oracle,
                Variant::LowRank,
            ],
            hmc: HmcConfig::default(),
            prior_radius_mm: DEFAULT_PRIOR_RADIUS_MM,
            mass_radius_mm: DEFAULT_MASS_RADIUS_MM,
            direct_draws: 1000,
            low_rank_fraction: 0.8,
            smoother: CorrelationModel::from_fwhm(6.0, 1.0).expect("valid smoother"),
            hyper: HyperOptions::default(),
            hyper_radius_mm: DEFAULT_PRIOR_RADIUS_MM,
            parallel_replicates: false,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for `(setting, replicate, slot)`; slot 0 generates data, the
/// others seed method fits, so all methods see the same replicate.
pub fn substream_seed(base: u64, setting: usize, replicate: usize, slot: usize) -> u64 {
    splitmix(splitmix(splitmix(base ^ setting as u64) ^ replicate as u64) ^ slot as u64)
}

fn method_slot(v: Variant) -> usize {
    match v {
        Variant::Working => 1,
        Variant::Marginal => 2,
        Variant::Conditional => 3,
        Variant::Glm => 4,
        Variant::GlmPs => 5,
        Variant::Oracle => 6,
        Variant::LowRank => 7,
    }
}

/// Shared inputs of the spatial variants for one replicate.
pub struct SpatialSetup {
    pub hyper: HyperEstimate,
    pub prior: SpatialPrior,
}

/// Estimates hyperparameters from the images and builds the prior.
pub fn spatial_setup(data: &SimData, mesh: &Arc<SphericalMesh>, opts: &StudyOptions) -> Result<SpatialSetup> {
    let index = NeighborIndex::build(mesh, opts.hyper_radius_mm)?;
    let hyper = estimate_hyper(&data.y, mesh, &index, &opts.hyper)?;
    let prior = SpatialPrior::new(mesh.clone(), hyper.kernel()?, opts.prior_radius_mm, opts.mass_radius_mm)?;
    Ok(SpatialSetup { hyper, prior })
}

/// Fits one method to one replicate.
pub fn fit_method(
    method: Variant,
    data: &SimData,
    cfg: &SimConfig,
    mesh: &Arc<SphericalMesh>,
    spatial: Option<&SpatialSetup>,
    opts: &StudyOptions,
    seed: u64,
) -> Result<PosteriorDraws> {
    let dataset = data.dataset()?;
    let (tau2, sigma2) = cfg.snr.variances();
    let oracle = OracleParams { kernel: cfg.truth_kernel, tau2, sigma2, beta_variance: vec![cfg.beta_variance; cfg.p] };
    let hmc = HmcConfig { seed, ..opts.hmc.clone() };
    let need = || spatial.ok_or_else(|| Error::argument("spatial variants need hyperparameter estimates"));
    match method {
        Variant::Working => fit_working(&dataset, &need()?.prior, &hmc),
        Variant::Marginal => {
            let sp = need()?;
            fit_marginal(&dataset, &sp.prior, &MarginalPlan { tau2: sp.hyper.params.tau2 }, &hmc)
        }
        Variant::Conditional => Ok(fit_conditional(&dataset, &need()?.prior, &hmc)?.0),
        Variant::Glm => fit_glm(&dataset, opts.direct_draws, seed),
        Variant::GlmPs => fit_glm_ps(&dataset, mesh, &opts.smoother, opts.direct_draws, seed),
        Variant::Oracle => fit_oracle(&dataset, mesh, &oracle, opts.direct_draws, seed),
        Variant::LowRank => {
            Ok(fit_low_rank(&dataset, mesh, &oracle, opts.low_rank_fraction, opts.direct_draws, seed)?.draws)
        }
    }
}

/// Scores of all replicates for one method and setting; failed fits are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyCell {
    pub snr: Snr,
    pub n: usize,
    pub method: Variant,
    pub scores: Vec<Option<Score>>,
    pub errors: Vec<String>,
}

/// Mean and simulation standard error over the successful replicates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

fn summarize(vals: impl Iterator<Item = f64>) -> Summary {
    let v: Vec<f64> = vals.collect();
    let k = v.len();
    if k == 0 {
        return Summary { mean: f64::NAN, se: f64::NAN, count: 0 };
    }
    let mean = v.iter().sum::<f64>() / k as f64;
    let se = if k > 1 {
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (k - 1) as f64 / k as f64).sqrt()
    } else {
        f64::NAN
    };
    Summary { mean, se, count: k }
}

impl StudyCell {
    fn ok(&self) -> impl Iterator<Item = &Score> {
        self.scores.iter().flatten()
    }

    pub fn mrse(&self) -> Summary {
        summarize(self.ok().map(|s| s.mrse))
    }

    pub fn ci95(&self) -> Summary {
        summarize(self.ok().map(|s| 100.0 * s.ci95))
    }

    pub fn cb80(&self) -> Summary {
        summarize(self.ok().map(|s| 100.0 * s.cb80))
    }

    pub fn cb80_vertex(&self) -> Summary {
        summarize(self.ok().map(|s| 100.0 * s.cb80_vertex))
    }

    pub fn mcc(&self) -> Summary {
        summarize(self.ok().map(|s| s.mcc))
    }

    pub fn failures(&self) -> usize {
        self.scores.iter().filter(|s| s.is_none()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResults {
    pub cells: Vec<StudyCell>,
}

impl StudyResults {
    pub fn cell(&self, snr: Snr, n: usize, method: Variant) -> Option<&StudyCell> {
        self.cells.iter().find(|c| c.snr == snr && c.n == n && c.method == method)
    }

    /// Table with one row per setting and method; missing cells are empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "snr,n,method,replicates,failed,mrse,mrse_se,ci95,ci95_se,cb80,cb80_se,cb80_vertex,cb80_vertex_se,mcc,mcc_se")?;
        let f = |v: f64| if v.is_finite() { format!("{v:.4}") } else { String::new() };
        for c in &self.cells {
            let (a, b, d, v, e) = (c.mrse(), c.ci95(), c.cb80(), c.cb80_vertex(), c.mcc());
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                c.snr.name(),
                c.n,
                c.method.name(),
                c.scores.len(),
                c.failures(),
                f(a.mean),
                f(a.se),
                f(b.mean),
                f(b.se),
                f(d.mean),
                f(d.se),
                f(v.mean),
                f(v.se),
                f(e.mean),
                f(e.se)
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(file)
    }
}

fn run_replicate(
    base: &SimConfig,
    setting: usize,
    snr: Snr,
    n: usize,
    r: usize,
    mesh: &Arc<SphericalMesh>,
    opts: &StudyOptions,
) -> Vec<std::result::Result<Score, String>> {
    let cfg = SimConfig { snr, n, ..base.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(base.seed, setting, r, 0));
    let data = match simulate_dataset(&cfg, mesh, &mut rng) {
        Ok(d) => d,
        Err(e) => return opts.methods.iter().map(|_| Err(format!("simulation: {e}"))).collect(),
    };
    let needs_spatial =
        opts.methods.iter().any(|m| matches!(m, Variant::Working | Variant::Marginal | Variant::Conditional));
    let spatial = if needs_spatial { Some(spatial_setup(&data, mesh, opts).map_err(|e| e.to_string())) } else { None };
    opts.methods
        .iter()
        .map(|&method| {
            let sp = match &spatial {
                Some(Err(e)) if matches!(method, Variant::Working | Variant::Marginal | Variant::Conditional) => {
                    return Err(format!("hyperparameters: {e}"))
                }
                Some(Ok(s)) => Some(s),
                _ => None,
            };
            let seed = substream_seed(base.seed, setting, r, method_slot(method));
            let started = std::time::Instant::now();
            let res = fit_method(method, &data, &cfg, mesh, sp, opts, seed)
                .and_then(|d| score_draws(&d, &data.beta))
                .map_err(|e| e.to_string());
            log::info!(
                "snr={} n={n} rep={r} {}: {} ({:.1}s)",
                snr.name(),
                method.name(),
                match &res {
                    Ok(s) => format!("mrse {:.2}% ci95 {:.3} cb80 {:.2} mcc {:.3}", s.mrse, s.ci95, s.cb80, s.mcc),
                    Err(e) => format!("failed: {e}"),
                },
                started.elapsed().as_secs_f64()
            );
            res
        })
        .collect()
}

/// Runs every method on `base.replicates` replicates of each `(snr, n)`
/// setting. Method failures are recorded per cell and do not abort.
pub fn run_study(base: &SimConfig, settings: &[(Snr, usize)], opts: &StudyOptions) -> Result<StudyResults> {
    base.validate()?;
    if settings.is_empty() || opts.methods.is_empty() || base.replicates == 0 {
        return Err(Error::argument("study needs settings, methods and replicates"));
    }
    let mesh = Arc::new(build_disc_mesh(base)?);
    let mut cells = Vec::new();
    for (k, &(snr, n)) in settings.iter().enumerate() {
        let run = |r: usize| run_replicate(base, k, snr, n, r, &mesh, opts);
        let reps: Vec<Vec<std::result::Result<Score, String>>> = if opts.parallel_replicates {
            (0..base.replicates).into_par_iter().map(run).collect()
        } else {
            (0..base.replicates).map(run).collect()
        };
        for (mi, &method) in opts.methods.iter().enumerate() {
            let mut scores = Vec::with_capacity(reps.len());
            let mut errors = Vec::new();
            for (r, rep) in reps.iter().enumerate() {
                match &rep[mi] {
                    Ok(s) => scores.push(Some(*s)),
                    Err(e) => {
                        scores.push(None);
                        errors.push(format!("replicate {r}: {e}"));
                    }
                }
            }
            cells.push(StudyCell { snr, n, method, scores, errors });
        }
    }
    Ok(StudyResults { cells })
}
