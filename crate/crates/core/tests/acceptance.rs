//! Acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance -- 1 4 12` runs a subset.
//! Set `GPIS_ACCEPTANCE_STRICT=1` to exit non-zero when anything fails.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use gpis::harness::{run_study, SimConfig, Snr, StudyOptions, StudyResults};
use gpis::hyperparam::{surrogate_loglik_with, HyperParams};
use gpis::inference::{mcse_mean, split_rhat, Variant};
use gpis::kernels::{fwhm_to_psi, psi_to_fwhm, CorrelationModel};
use gpis::model::{ChainState, Design, GeneratedOutcomes, SufficientStats};
use gpis::samplers::{
    gibbs_update_variances, run_chain, ChainControl, HmcConfig, SpatialPrior, UpdateFlags, WorkingTarget,
    DEFAULT_MASS_RADIUS_MM, DEFAULT_PRIOR_RADIUS_MM,
};
use gpis::sphere::{fibonacci_count_for_spacing, fibonacci_sphere, NeighborIndex, SphericalMesh};
use gpis::vecchia::{CovarianceSpec, Nugget, VecchiaOptions, VecchiaPrecision};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn disc(m: usize) -> Arc<SphericalMesh> {
    let sphere = fibonacci_sphere(fibonacci_count_for_spacing(100.0, 2.0), 100.0).unwrap();
    let ids = sphere.nearest_disc(0, m).unwrap();
    Arc::new(sphere.submesh(&ids).unwrap())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

// ---------------------------------------------------------------- 1

fn kernel_anchors() -> Verdict {
    let psi = fwhm_to_psi(6.0, 2.0).unwrap();
    let fwhm = psi_to_fwhm(0.17, 1.38).unwrap();
    verdict(
        (psi - 0.0770).abs() <= 0.0005 && (fwhm - 5.55).abs() <= 0.05,
        format!("psi(6mm, 2) = {psi:.5}, fwhm(0.17, 1.38) = {fwhm:.4} mm"),
    )
}

// ---------------------------------------------------------------- 2

fn dense_cov(mesh: &SphericalMesh, spec: &CovarianceSpec) -> DMatrix<f64> {
    DMatrix::from_fn(mesh.len(), mesh.len(), |a, b| spec.cov(mesh, a, b))
}

fn vecchia_exactness() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cases = [(300, 6.0, 1.0, 1.0, 0.0), (300, 6.0, 1.5, 0.7, 0.3), (150, 10.0, 1.9, 1.3, 0.2)];
    for &(m, fwhm, nu, tau2, nug) in &cases {
        let mesh = disc(m);
        let index = NeighborIndex::build(&mesh, mesh.diameter() + 1.0).unwrap();
        let opts = VecchiaOptions { max_neighbors: m, ..VecchiaOptions::default() };
        let kernel = CorrelationModel::from_fwhm(fwhm, nu).unwrap();
        let nugget = if nug > 0.0 { Nugget::Constant(nug) } else { Nugget::None };
        let spec = CovarianceSpec { kernel, scale: tau2, nugget };
        let vp = VecchiaPrecision::build_with(&mesh, &index, &spec, opts).unwrap();
        let c = dense_cov(&mesh, &spec);
        let chol = c.clone().cholesky().unwrap();
        let ld: f64 = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        worst = worst.max((vp.log_det() - ld).abs() / ld.abs().max(1.0));
        let n_img = 5;
        let mut images = Vec::new();
        let mut dense_ll = 0.0;
        for _ in 0..n_img {
            let v = randn(&mut rng, m);
            let dv = DVector::from_vec(v.clone());
            let q = dv.dot(&chol.solve(&dv));
            worst = worst.max(rel(vp.quad_form(&v).unwrap(), q));
            let cv = vp.apply_covariance(&v).unwrap();
            let dense = &c * &dv;
            let err = cv.iter().zip(dense.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(err / dense.amax());
            dense_ll += -0.5 * ld - 0.5 * q;
            images.extend(v);
        }
        if nug > 0.0 {
            let params = HyperParams { psi: kernel.psi(), nu, tau2, sigma2_0: nug };
            let ll = surrogate_loglik_with(&images, &mesh, &index, &params, opts);
            worst = worst.max(rel(ll, dense_ll));
        }
    }
    verdict(worst <= 1e-8, format!("max relative error {worst:.2e} over log-det, quad form, C v, surrogate loglik"))
}

// ---------------------------------------------------------------- shared regression problem

struct Problem {
    design: Design,
    y: Vec<f64>,
    target: WorkingTarget,
}

fn problem(n: usize, m: usize, p: usize, seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mesh = disc(m);
    let kernel = CorrelationModel::from_fwhm(6.0, 1.5).unwrap();
    let prior = SpatialPrior::new(mesh, kernel, DEFAULT_PRIOR_RADIUS_MM, DEFAULT_MASS_RADIUS_MM).unwrap();
    let mut x = randn(&mut rng, n * p);
    for i in 0..n {
        x[i * p] = 1.0;
    }
    let design = Design::factorize(&x, n, p).unwrap();
    let beta: Vec<f64> = (0..p * m).map(|k| ((k % m) as f64 * 0.1 + k as f64 / m as f64).sin()).collect();
    let mut y = vec![0.0; n * m];
    for i in 0..n {
        for s in 0..m {
            let mu: f64 = (0..p).map(|j| x[i * p + j] * beta[j * m + s]).sum();
            y[i * m + s] = mu + 0.7 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let stats = Arc::new(SufficientStats::stream(&design, m, y.chunks(m)).unwrap());
    let target = WorkingTarget::new(stats, &design, prior).unwrap();
    Problem { design, y, target }
}

fn random_state(t: &WorkingTarget, rng: &mut ChaCha8Rng) -> ChainState {
    let (k, m, p) = (t.rank(), t.m(), t.p);
    let mut st = ChainState::new(k, m, p, 1.0);
    st.gamma = randn(rng, k * m);
    st.sigma2.iter_mut().for_each(|s| *s = 0.3 + rng.random::<f64>());
    st.tau2 = 0.8;
    st.zeta2 = (0..p).map(|j| 0.5 + j as f64 * 0.4).collect();
    st
}

/// Closed-form Gaussian posterior of γ for fixed variances: precision and
/// linear term, built densely.
fn dense_posterior(t: &WorkingTarget, st: &ChainState) -> (DMatrix<f64>, DVector<f64>) {
    let (k, m) = (t.rank(), t.m());
    let q = t.prior.precision.dense_precision();
    let mix = t.prior_mix(&st.zeta2);
    let d = t.stats.singular_values();
    let proj = t.stats.projected();
    let mut a = DMatrix::zeros(k * m, k * m);
    let mut b = DVector::zeros(k * m);
    for c in 0..k {
        for l in 0..k {
            for s in 0..m {
                for u in 0..m {
                    a[(c * m + s, l * m + u)] = mix[c * k + l] / st.tau2 * q[s * m + u];
                }
            }
        }
        for s in 0..m {
            a[(c * m + s, c * m + s)] += d[c] * d[c] / st.sigma2[s];
            b[c * m + s] = d[c] * proj[c * m + s] / st.sigma2[s];
        }
    }
    (a, b)
}

// ---------------------------------------------------------------- 3

fn gradient_check() -> Verdict {
    let pr = problem(10, 60, 3, 1);
    let t = &pr.target;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let st = random_state(t, &mut rng);
    let (_, g) = t.potential_and_gradient(&st).unwrap();
    let gmax = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let i = rng.random_range(0..st.gamma.len());
        let h = 1e-5;
        let (mut sp, mut sm) = (st.clone(), st.clone());
        sp.gamma[i] += h;
        sm.gamma[i] -= h;
        let fd = (t.potential_and_gradient(&sp).unwrap().0 - t.potential_and_gradient(&sm).unwrap().0) / (2.0 * h);
        // denominators floored at 1% of the largest component
        worst = worst.max((fd - g[i]).abs() / g[i].abs().max(1e-2 * gmax));
    }
    verdict(worst <= 1e-5, format!("20 coordinates, max relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- 4

fn exact_posterior_recovery() -> Verdict {
    let pr = problem(20, 80, 2, 31);
    let t = &pr.target;
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut st = random_state(t, &mut rng);
    st.zeta2 = vec![1.0, 1.0];
    let (a, b) = dense_posterior(t, &st);
    let chol = a.cholesky().unwrap();
    let exact: Vec<f64> = chol.solve(&b).iter().copied().collect();
    let cov = chol.inverse();
    st.gamma = exact.clone();
    let coords = [0usize, 17, 40, 83, 141];
    let draws = 100_000;
    let cfg = HmcConfig {
        warmup: 1000,
        samples: draws,
        thin: 1,
        chains: 1,
        leapfrog_steps: 20,
        seed: 5,
        ..HmcConfig::default()
    };
    let control = ChainControl { flags: UpdateFlags::none(), init: Some(st), ..ChainControl::default() };
    let mut trace: Vec<Vec<f64>> = vec![Vec::with_capacity(draws); coords.len()];
    run_chain(t, &cfg, &control, 0, &mut |s| {
        for (tr, &c) in trace.iter_mut().zip(&coords) {
            tr.push(s.gamma[c]);
        }
    })
    .unwrap();
    let means: Vec<f64> = trace.iter().map(|tr| tr.iter().sum::<f64>() / tr.len() as f64).collect();
    let mut z_max: f64 = 0.0;
    for ((tr, &c), mu) in trace.iter().zip(&coords).zip(&means) {
        let se = mcse_mean(std::slice::from_ref(tr)).unwrap();
        z_max = z_max.max((mu - exact[c]).abs() / se);
    }
    let k = coords.len();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..k {
        for j in 0..k {
            let s: f64 = trace[i].iter().zip(&trace[j]).map(|(x, y)| (x - means[i]) * (y - means[j])).sum::<f64>()
                / (draws - 1) as f64;
            let e = cov[(coords[i], coords[j])];
            num += (s - e) * (s - e);
            den += e * e;
        }
    }
    let cov_err = (num / den).sqrt();
    verdict(
        z_max <= 3.0 && cov_err <= 0.10,
        format!(
            "max |mean - exact| / MCSE = {z_max:.2}, 5x5 covariance relative Frobenius error {:.1}%",
            100.0 * cov_err
        ),
    )
}

// ---------------------------------------------------------------- 5

/// Total variation between draws and a density tabulated on a grid.
fn grid_tv(draws: &[f64], log_density: impl Fn(f64) -> f64, lo: f64, hi: f64, bins: usize) -> f64 {
    let sub = 200;
    let h = (hi - lo) / (bins * sub) as f64;
    let vals: Vec<f64> = (0..bins * sub).map(|i| log_density(lo + (i as f64 + 0.5) * h)).collect();
    let top = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mass: Vec<f64> = vals.iter().map(|v| (v - top).exp()).collect();
    let total: f64 = mass.iter().sum();
    let mut counts = vec![0.0; bins];
    let mut outside = 0.0;
    for &d in draws {
        if d < lo || d >= hi {
            outside += 1.0;
            continue;
        }
        counts[(((d - lo) / (hi - lo)) * bins as f64) as usize] += 1.0;
    }
    let n = draws.len() as f64;
    let mut tv = outside / n;
    for b in 0..bins {
        let pb: f64 = mass[b * sub..(b + 1) * sub].iter().sum::<f64>() / total;
        tv += (counts[b] / n - pb).abs();
    }
    0.5 * tv
}

fn gibbs_conditionals() -> Verdict {
    let mesh = Arc::new(fibonacci_sphere(1, 100.0).unwrap());
    let kernel = CorrelationModel::from_fwhm(6.0, 1.0).unwrap();
    let prior = SpatialPrior::new(mesh, kernel, 8.0, 3.0).unwrap();
    let y = [0.3, -1.2, 0.8, 2.1, 0.0, -0.4, 1.1];
    let n = y.len();
    let design = Design::factorize(&vec![1.0; n], n, 1).unwrap();
    let stats = Arc::new(SufficientStats::stream(&design, 1, y.iter().map(|v| vec![*v])).unwrap());
    let t = WorkingTarget::new(stats, &design, prior).unwrap();
    let beta = 0.25;
    let rss: f64 = y.iter().map(|v| (v - beta) * (v - beta)).sum();
    let base = {
        let mut st = ChainState::new(1, 1, 1, 0.9);
        st.gamma = design.gamma_from_beta(&[beta], 1);
        st.xi = 0.6;
        st.tau2 = 0.7;
        st.zeta2 = vec![1.3];
        st
    };
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let count = 100_000;
    let draw = |flags: UpdateFlags, rng: &mut ChaCha8Rng, reset: bool, pick: &dyn Fn(&ChainState) -> f64| {
        let mut st = base.clone();
        (0..count)
            .map(|_| {
                if reset {
                    st = base.clone();
                }
                gibbs_update_variances(&mut st, &t, flags, rng);
                pick(&st)
            })
            .collect::<Vec<f64>>()
    };
    let hi = |d: &[f64]| 1.0001 * d.iter().cloned().fold(0.0, f64::max);
    let mut tvs = BTreeMap::new();

    // σ⁻²: normal likelihood times the Gamma(1/2, ξ) prior
    let sig = UpdateFlags { sigma2: true, zeta2: false, tau2: false };
    let d = draw(sig, &mut rng, true, &|s| 1.0 / s.sigma2[0]);
    let (xi, nf) = (base.xi, n as f64);
    let logd = |w: f64| 0.5 * nf * w.ln() - 0.5 * w * rss - 0.5 * w.ln() - xi * w;
    tvs.insert("sigma^-2", grid_tv(&d, logd, 0.0, hi(&d), 40));

    // ξ with σ² integrated out: the (σ², ξ) sweep targets this marginal
    let d = draw(sig, &mut rng, false, &|s| s.xi);
    let a = 0.5 + 0.5 * nf;
    let logd = |x: f64| -x - a * (x + 0.5 * rss).ln();
    tvs.insert("xi", grid_tv(&d, logd, 0.0, hi(&d), 40));

    // ζ⁻² and τ⁻²: N(β | 0, τ²ζ²) times Gamma(1, 1/2)
    let b2 = beta * beta;
    let zeta = UpdateFlags { sigma2: false, zeta2: true, tau2: false };
    let d = draw(zeta, &mut rng, true, &|s| 1.0 / s.zeta2[0]);
    let tau2 = base.tau2;
    let logd = |w: f64| 0.5 * w.ln() - 0.5 * w * b2 / tau2 - 0.5 * w;
    tvs.insert("zeta^-2", grid_tv(&d, logd, 0.0, hi(&d), 40));

    let tau = UpdateFlags { sigma2: false, zeta2: false, tau2: true };
    let d = draw(tau, &mut rng, true, &|s| 1.0 / s.tau2);
    let z2 = base.zeta2[0];
    let logd = |w: f64| 0.5 * w.ln() - 0.5 * w * b2 / z2 - 0.5 * w;
    tvs.insert("tau^-2", grid_tv(&d, logd, 0.0, hi(&d), 40));

    let worst = tvs.values().cloned().fold(0.0, f64::max);
    let detail: Vec<String> = tvs.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
    verdict(worst <= 0.02, format!("total variation: {}", detail.join(", ")))
}

// ---------------------------------------------------------------- 6

fn sufficient_stat_identity() -> Verdict {
    let (n, m, p) = (20, 100, 3);
    let pr = problem(n, m, p, 40);
    let t = &pr.target;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let st = random_state(t, &mut rng);
    let beta = pr.design.beta_from_gamma(&st.gamma, m);
    let x = pr.design.x();
    let mut rss = vec![0.0; m];
    for i in 0..n {
        for s in 0..m {
            let mu: f64 = (0..p).map(|j| x[i * p + j] * beta[j * m + s]).sum();
            let r = pr.y[i * m + s] - mu;
            rss[s] += r * r;
        }
    }
    let ll: f64 = rss.iter().zip(&st.sigma2).map(|(r, s2)| -0.5 * r / s2 - 0.5 * n as f64 * s2.ln()).sum();
    let streamed = t.stats.residual_ss(&st.gamma);
    let worst_rss = streamed.iter().zip(&rss).map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max);
    let ll_err = rel(t.stats.working_loglik(&st).unwrap(), ll);
    verdict(
        worst_rss <= 1e-10 && ll_err <= 1e-10,
        format!("residual SS max rel err {worst_rss:.2e}, log likelihood rel err {ll_err:.2e}"),
    )
}

// ---------------------------------------------------------------- 7

fn simulation_fidelity() -> Verdict {
    let reps = 10;
    let cfg = SimConfig { n: 3, ..SimConfig::default() };
    let mesh = gpis::harness::build_disc_mesh(&cfg).unwrap();
    let m = cfg.vertices;
    let mut zero = vec![0.0; cfg.p];
    for r in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + r as u64);
        let d = gpis::harness::simulate_dataset(&cfg, &mesh, &mut rng).unwrap();
        for (j, z) in zero.iter_mut().enumerate() {
            *z += d.beta[j * m..(j + 1) * m].iter().filter(|b| **b == 0.0).count() as f64 / (m * reps) as f64;
        }
    }
    let expected = cfg.expected_sparsity();
    let low = SimConfig { snr: Snr::Low, ..cfg.clone() };
    let high = SimConfig { snr: Snr::High, ..cfg.clone() };
    let snr_ok = (low.snr_ratio() - 0.04).abs() < 1e-12 && (high.snr_ratio() - 0.40).abs() < 1e-12;
    let sparse_ok = zero.iter().all(|z| (z - 0.31).abs() <= 0.04);
    let zs: Vec<String> = zero.iter().map(|z| format!("{:.1}%", 100.0 * z)).collect();
    verdict(
        sparse_ok && snr_ok && (expected - 0.311).abs() < 1e-3,
        format!(
            "zero fraction per coefficient over {reps} truths [{}], P(|Z|<=0.4) = {:.4}, SNR {:.0}% / {:.0}%",
            zs.join(", "),
            expected,
            100.0 * low.snr_ratio(),
            100.0 * high.snr_ratio()
        ),
    )
}

// ---------------------------------------------------------------- 8, 9, 11

fn study_hmc() -> HmcConfig {
    HmcConfig { warmup: 400, samples: 800, thin: 2, chains: 2, ..HmcConfig::default() }
}

fn study_base() -> SimConfig {
    SimConfig { vertices: 500, n: 100, replicates: 10, seed: 2024, ..SimConfig::default() }
}

fn high_snr_study() -> StudyResults {
    let opts = StudyOptions { hmc: study_hmc(), ..StudyOptions::default() };
    run_study(&study_base(), &[(Snr::High, 100)], &opts).unwrap()
}

fn low_snr_study() -> StudyResults {
    let opts =
        StudyOptions { methods: vec![Variant::GlmPs, Variant::Working], hmc: study_hmc(), ..StudyOptions::default() };
    run_study(&study_base(), &[(Snr::Low, 100)], &opts).unwrap()
}

fn table_reproduction(res: &StudyResults) -> Vec<(String, Verdict)> {
    let cell = |v: Variant| res.cell(Snr::High, 100, v).unwrap();
    let mut failed: Vec<String> = Vec::new();
    for c in &res.cells {
        if c.failures() > 0 {
            failed.push(format!("{} ({})", c.method.name(), c.errors.join("; ")));
        }
    }
    let ci = |v: Variant| cell(v).ci95().mean;
    let (mg, or, wk, cd) = (ci(Variant::Marginal), ci(Variant::Oracle), ci(Variant::Working), ci(Variant::Conditional));
    let within = |x: f64, lo: f64, hi: f64| x >= lo && x <= hi;
    let a = verdict(
        failed.is_empty()
            && within(mg, 90.0, 98.0)
            && within(or, 90.0, 98.0)
            && within(wk, 85.0, 95.0)
            && cd < 80.0
            && mg > wk
            && wk > cd,
        format!("95% CI coverage: marginal {mg:.1}%, oracle {or:.1}%, working {wk:.1}%, conditional {cd:.1}%"),
    );

    let reps = |v: Variant| cell(v).scores.iter().map(|s| s.map(|s| s.mrse)).collect::<Vec<_>>();
    let (o, w, g) = (reps(Variant::Oracle), reps(Variant::Working), reps(Variant::GlmPs));
    let mut ordered = 0;
    let mut total = 0;
    for r in 0..o.len() {
        if let (Some(o), Some(w), Some(g)) = (o[r], w[r], g[r]) {
            total += 1;
            if o <= w && w <= g {
                ordered += 1;
            }
        }
    }
    let mr = |v: Variant| cell(v).mrse().mean;
    let b = verdict(
        total == o.len() && ordered == total,
        format!(
            "oracle <= working <= GLM-PS in {ordered}/{total} replicates (mean MRSE {:.2}% / {:.2}% / {:.2}%)",
            mr(Variant::Oracle),
            mr(Variant::Working),
            mr(Variant::GlmPs)
        ),
    );

    let (mw, mp) = (cell(Variant::Working).mcc().mean, cell(Variant::GlmPs).mcc().mean);
    let c = verdict(mw > mp, format!("MCC working {mw:.3}, GLM-PS {mp:.3}"));

    let cb = |v: Variant| (cell(v).cb80().mean, cell(v).cb80_vertex().mean);
    let ((bw, vw), (bm, vm)) = (cb(Variant::Working), cb(Variant::Marginal));
    let d = verdict(
        bw >= 95.0 && bm >= 95.0,
        format!(
            "fields fully inside the 80% band: working {bw:.1}%, marginal {bm:.1}% (vertex-level: {vw:.1}% / {vm:.1}%)"
        ),
    );
    let mut rows = vec![("8a".to_string(), a), ("8b".to_string(), b), ("8c".to_string(), c), ("8d".to_string(), d)];
    let summary: Vec<String> = res
        .cells
        .iter()
        .map(|c| {
            format!("{} mrse {:.2} ci95 {:.1} mcc {:.3}", c.method.name(), c.mrse().mean, c.ci95().mean, c.mcc().mean)
        })
        .collect();
    rows.push(("8".to_string(), verdict(rows.iter().all(|(_, v)| v.pass), summary.join("; "))));
    rows
}

fn low_snr_sanity(res: &StudyResults) -> Verdict {
    let ci = |v: Variant| res.cell(Snr::Low, 100, v).unwrap().ci95().mean;
    let fails: usize = res.cells.iter().map(|c| c.failures()).sum();
    let (g, w) = (ci(Variant::GlmPs), ci(Variant::Working));
    verdict(
        fails == 0 && g < 50.0 && (80.0..=95.0).contains(&w),
        format!("95% CI coverage: GLM-PS {g:.1}%, working {w:.1}%"),
    )
}

fn band_conservatism(studies: &[&StudyResults]) -> Verdict {
    let mut fits = 0;
    let mut bad = Vec::new();
    for res in studies {
        for c in &res.cells {
            for (r, s) in c.scores.iter().enumerate() {
                if let Some(s) = s {
                    fits += 1;
                    if !s.band_subset {
                        bad.push(format!("{} rep {r}", c.method.name()));
                    }
                }
            }
        }
    }
    verdict(
        bad.is_empty() && fits > 0,
        format!("{fits} fitted models, violations: {}", if bad.is_empty() { "none".into() } else { bad.join(", ") }),
    )
}

// ---------------------------------------------------------------- 10

fn rhat_calibration() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let chains: Vec<Vec<f64>> = (0..8).map(|_| randn(&mut rng, 1000)).collect();
    let (u, f) = (split_rhat(&chains, false).unwrap(), split_rhat(&chains, true).unwrap());
    let mut shifted = chains.clone();
    shifted[0].iter_mut().for_each(|v| *v += 3.0);
    let (us, fs) = (split_rhat(&shifted, false).unwrap(), split_rhat(&shifted, true).unwrap());
    verdict(
        u < 1.01 && f < 1.01 && us.max(fs) > 1.1,
        format!("iid: {u:.4} / {f:.4} (unfolded / folded); one chain shifted by 3 sd: {us:.3} / {fs:.3}"),
    )
}

// ---------------------------------------------------------------- 12

fn peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

fn reset_peak_rss() {
    let _ = std::fs::write("/proc/self/clear_refs", "5");
}

fn synthetic_images(n: usize, m: usize) -> GeneratedOutcomes<impl Fn(usize, &mut [f64]) + Send + Sync> {
    GeneratedOutcomes::new(n, m, move |i, buf: &mut [f64]| {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        for (s, v) in buf.iter_mut().enumerate() {
            *v = 0.3 * (s as f64 * 0.01).sin() + rng.sample::<f64, _>(StandardNormal);
        }
    })
}

fn intercept_target(prior: &SpatialPrior, n: usize) -> WorkingTarget {
    let m = prior.m();
    let design = Design::factorize(&vec![1.0; n], n, 1).unwrap();
    let stats = Arc::new(SufficientStats::from_source(&design, &synthetic_images(n, m)).unwrap());
    WorkingTarget::new(stats, &design, prior.clone()).unwrap()
}

fn performance() -> Verdict {
    let m = 5000;
    reset_peak_rss();
    let start = Instant::now();
    let mesh = disc(m);
    let kernel = CorrelationModel::from_fwhm(6.0, 1.0).unwrap();
    let prior = SpatialPrior::new(mesh, kernel, DEFAULT_PRIOR_RADIUS_MM, DEFAULT_MASS_RADIUS_MM).unwrap();
    let target = intercept_target(&prior, 500);
    let cfg = HmcConfig { warmup: 500, samples: 500, thin: 1, chains: 1, seed: 12, ..HmcConfig::default() };
    let mut kept = Vec::new();
    run_chain(&target, &cfg, &ChainControl::default(), 0, &mut |s| kept.push(target.beta(&s.gamma))).unwrap();
    let total = start.elapsed().as_secs_f64();
    let peak = peak_rss_mb();

    // per-iteration cost at two sample sizes, same mesh and step count;
    // each target gets its own adapted step, runs are interleaved and the
    // fastest of each kept
    let targets = [intercept_target(&prior, 500), intercept_target(&prior, 5000)];
    let timing: Vec<HmcConfig> = targets
        .iter()
        .map(|t| {
            let tune = HmcConfig { warmup: 150, samples: 1, thin: 1, chains: 1, seed: 3, ..HmcConfig::default() };
            let step = run_chain(t, &tune, &ChainControl::default(), 0, &mut |_| {}).unwrap().step_size;
            HmcConfig { warmup: 0, samples: 30, initial_step: Some(step), ..tune }
        })
        .collect();
    let mut best = [f64::INFINITY; 2];
    for _ in 0..6 {
        for ((t, cfg), b) in targets.iter().zip(&timing).zip(best.iter_mut()) {
            let t0 = Instant::now();
            run_chain(t, cfg, &ChainControl::default(), 0, &mut |_| {}).unwrap();
            *b = b.min(t0.elapsed().as_secs_f64() / cfg.samples as f64);
        }
    }
    let [small, large] = best;
    let ratio = large / small;
    let mem_ok = peak.map(|p| p < 1024.0).unwrap_or(false);
    verdict(
        total < 300.0 && mem_ok && ratio <= 1.2,
        format!(
            "1000 iterations at M=5000, N=500 in {total:.1}s, peak RSS {}; per iteration {:.1} ms (N=500) vs {:.1} ms (N=5000), ratio {ratio:.3}",
            peak.map(|p| format!("{p:.0} MB")).unwrap_or_else(|| "unavailable".into()),
            1e3 * small,
            1e3 * large
        ),
    )
}

// ----------------------------------------------------------------

fn record(results: &mut Vec<(String, Verdict)>, id: &str, name: &str, v: Verdict) {
    println!("{} criterion {id} ({name}): {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    results.push((id.to_string(), v));
}

fn timed(f: impl FnOnce() -> Verdict) -> Verdict {
    let t = Instant::now();
    let mut v = f();
    v.detail = format!("{} [{:.1}s]", v.detail, t.elapsed().as_secs_f64());
    v
}

fn main() {
    let _ = env_logger::builder().is_test(true).try_init();
    let selected: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let want = |id: &str| selected.is_empty() || selected.iter().any(|s| s == id);
    let mut results: Vec<(String, Verdict)> = Vec::new();
    let quick: [(&str, &str, fn() -> Verdict); 7] = [
        ("1", "kernel anchors", kernel_anchors),
        ("2", "Vecchia exactness", vecchia_exactness),
        ("3", "gradient", gradient_check),
        ("4", "exact posterior recovery", exact_posterior_recovery),
        ("5", "Gibbs conditionals", gibbs_conditionals),
        ("6", "sufficient statistics", sufficient_stat_identity),
        ("7", "simulation fidelity", simulation_fidelity),
    ];
    for (id, name, f) in quick {
        if want(id) {
            record(&mut results, id, name, timed(f));
        }
    }

    let study = |f: fn() -> StudyResults, label: &str| {
        let t = Instant::now();
        let r = f();
        println!("  ({label} study finished in {:.1}s)", t.elapsed().as_secs_f64());
        r
    };
    let high = (want("8") || want("11")).then(|| study(high_snr_study, "SNR 40%"));
    if let (Some(res), true) = (&high, want("8")) {
        for (id, v) in table_reproduction(res) {
            record(&mut results, &id, "scaled table, SNR 40%", v);
        }
    }
    let low = (want("9") || want("11")).then(|| study(low_snr_study, "SNR 4%"));
    if let (Some(res), true) = (&low, want("9")) {
        record(&mut results, "9", "low SNR", low_snr_sanity(res));
    }
    if want("10") {
        record(&mut results, "10", "R-hat calibration", timed(rhat_calibration));
    }
    if want("11") {
        let studies: Vec<&StudyResults> = high.iter().chain(low.iter()).collect();
        record(&mut results, "11", "band conservatism", band_conservatism(&studies));
    }
    if want("12") {
        record(&mut results, "12", "performance", timed(performance));
    }

    let failed: Vec<&str> = results.iter().filter(|(_, v)| !v.pass).map(|(id, _)| id.as_str()).collect();
    let tail = if failed.is_empty() { String::new() } else { format!(" ({})", failed.join(", ")) };
    println!("acceptance: {} checked, {} failed{tail}", results.len(), failed.len());
    if !failed.is_empty() && std::env::var_os("GPIS_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
