use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::inference::{DrawsMeta, PosteriorDraws, Variant};
use crate::kernels::CorrelationModel;
use crate::model::{Design, InMemoryOutcomes, RegressionDataset};
use crate::samplers::HmcConfig;

fn small(vertices: usize, n: usize, snr: Snr) -> SimConfig {
    SimConfig { vertices, n, snr, replicates: 2, ..SimConfig::default() }
}

fn ols(x: &[f64], y: &[f64], n: usize, p: usize, m: usize) -> Vec<f64> {
    let xm = nalgebra::DMatrix::from_row_slice(n, p, x);
    let ym = nalgebra::DMatrix::from_row_slice(n, m, y);
    let b = (xm.transpose() * &xm).cholesky().unwrap().solve(&(xm.transpose() * ym));
    (0..p).flat_map(|j| (0..m).map(move |s| (j, s))).map(|(j, s)| b[(j, s)]).collect()
}

#[test]
fn snr_identities() {
    let low = SimConfig { snr: Snr::Low, ..SimConfig::default() };
    let high = SimConfig { snr: Snr::High, ..SimConfig::default() };
    assert!((low.snr_ratio() - 0.04).abs() < 1e-12);
    assert!((high.snr_ratio() - 0.40).abs() < 1e-12);
    assert!((low.r_squared() - 0.12 / 3.12).abs() < 1e-12);
    assert!((high.r_squared() - 0.12 / 0.42).abs() < 1e-12);
    assert!((low.expected_sparsity() - 0.3108).abs() < 1e-3);
}

#[test]
fn truth_sparsity_and_design() {
    let cfg = SimConfig { n: 1000, ..SimConfig::default() };
    let mesh = build_disc_mesh(&cfg).unwrap();
    assert_eq!(mesh.len(), 2000);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = simulate_dataset(&cfg, &mesh, &mut rng).unwrap();
    for j in 0..3 {
        let zeros = d.beta[j * 2000..(j + 1) * 2000].iter().filter(|b| **b == 0.0).count() as f64 / 2000.0;
        assert!((zeros - 0.311).abs() <= 0.04 * 2.5, "coef {j}: zero fraction {zeros}");
    }
    let (a, b): (Vec<f64>, Vec<f64>) = (0..d.n).map(|i| (d.x[i * 3 + 1], d.x[i * 3 + 2])).unzip();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(&a), mean(&b));
    let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>();
    let va = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>();
    let vb = b.iter().map(|y| (y - mb) * (y - mb)).sum::<f64>();
    assert!((cov / (va * vb).sqrt() - 0.5).abs() < 0.05);
    assert!(d.x.chunks(3).all(|r| r[0] == 1.0));
}

#[test]
fn sparsity_pooled_over_replicates() {
    // per-coefficient sparsity fluctuates with the field; the mean over
    // replicates must sit at P(|Z| <= 0.4)
    let cfg = small(2000, 5, Snr::High);
    let mesh = build_disc_mesh(&cfg).unwrap();
    let mut fracs = Vec::new();
    for r in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + r);
        let d = simulate_dataset(&cfg, &mesh, &mut rng).unwrap();
        fracs.push(d.beta.iter().filter(|b| **b == 0.0).count() as f64 / d.beta.len() as f64);
    }
    let avg = fracs.iter().sum::<f64>() / fracs.len() as f64;
    assert!((avg - 0.311).abs() <= 0.04, "{fracs:?}");
}

#[test]
fn glm_matches_least_squares_and_covers() {
    let (n, m, p) = (30, 400, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..n).flat_map(|i| [1.0, (i as f64 * 0.7).cos()]).collect();
    let beta: Vec<f64> = (0..p * m).map(|k| (k as f64 * 0.05).sin()).collect();
    let y: Vec<f64> = (0..n * m)
        .map(|k| {
            let (i, s) = (k / m, k % m);
            x[i * p] * beta[s] + x[i * p + 1] * beta[m + s] + 0.7 * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let ds = RegressionDataset::new(
        Design::factorize(&x, n, p).unwrap(),
        Arc::new(InMemoryOutcomes::new(y.clone(), n, m).unwrap()),
    )
    .unwrap();
    let draws = fit_glm(&ds, 4000, 3).unwrap();
    let bhat = ols(&x, &y, n, p, m);
    let mean = draws.mean();
    let sd = draws.sd();
    for k in 0..p * m {
        assert!((mean[k] - bhat[k]).abs() < 5.0 * sd[k] / 4000f64.sqrt(), "{k}");
    }
    let cov = crate::inference::pointwise_intervals(&draws, 0.95).unwrap().coverage(&beta);
    assert!((0.93..=0.97).contains(&cov), "coverage {cov}");
    assert!(draws.sigma2.is_some());
    let tiny = RegressionDataset::new(
        Design::factorize(&x[..4], 2, 2).unwrap(),
        Arc::new(InMemoryOutcomes::new(vec![0.0; 2 * m], 2, m).unwrap()),
    )
    .unwrap();
    assert!(fit_glm(&tiny, 10, 1).is_err());
}

#[test]
fn smoothing_properties() {
    let cfg = small(300, 5, Snr::High);
    let mesh = build_disc_mesh(&cfg).unwrap();
    let sm = Smoother::new(&mesh, &CorrelationModel::from_fwhm(6.0, 1.0).unwrap()).unwrap();
    let flat = sm.apply(&vec![2.5; 300]);
    assert!(flat.iter().all(|v| (v - 2.5).abs() < 1e-12));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut raw_var = 0.0;
    let mut sm_var = 0.0;
    for _ in 0..50 {
        let y: Vec<f64> = (0..300).map(|_| rng.sample(StandardNormal)).collect();
        let z = sm.apply(&y);
        raw_var += y.iter().map(|v| v * v).sum::<f64>();
        sm_var += z.iter().map(|v| v * v).sum::<f64>();
    }
    assert!(sm_var < 0.5 * raw_var);
}

fn oracle_case(seed: u64) -> (SimConfig, Arc<crate::sphere::SphericalMesh>, SimData) {
    let cfg = small(120, 40, Snr::High);
    let mesh = Arc::new(build_disc_mesh(&cfg).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = simulate_dataset(&cfg, &mesh, &mut rng).unwrap();
    (cfg, mesh, d)
}

fn oracle_params(cfg: &SimConfig, beta_var: f64) -> OracleParams {
    let (tau2, sigma2) = cfg.snr.variances();
    OracleParams { kernel: cfg.truth_kernel, tau2, sigma2, beta_variance: vec![beta_var; cfg.p] }
}

#[test]
fn oracle_flat_prior_limit_is_least_squares() {
    // with a shared noise covariance, GLS equals OLS image by image
    let (cfg, mesh, d) = oracle_case(5);
    let mean = oracle_mean(&d.dataset().unwrap(), &mesh, &oracle_params(&cfg, 1e9)).unwrap();
    let b = ols(&d.x, &d.y, d.n, d.p, d.m);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(mean.iter().zip(&b).all(|(a, c)| (a - c).abs() < 1e-5 * scale));
}

#[test]
fn oracle_draws_and_low_rank() {
    let (cfg, mesh, d) = oracle_case(6);
    let ds = d.dataset().unwrap();
    let params = oracle_params(&cfg, cfg.beta_variance);
    let mean = oracle_mean(&ds, &mesh, &params).unwrap();
    let draws = fit_oracle(&ds, &mesh, &params, 4000, 7).unwrap();
    let dm = draws.mean();
    let sd = draws.sd();
    assert!(dm.iter().zip(&mean).zip(&sd).all(|((a, b), s)| (a - b).abs() < 5.0 * s / 4000f64.sqrt()));

    let full = fit_low_rank(&ds, &mesh, &params, 1.0, 100, 7).unwrap();
    assert_eq!(full.rank, d.p * d.m);
    let scale = mean.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let err = full.mean.iter().zip(&mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1e-8 * scale, "{err}");
    let lr = fit_low_rank(&ds, &mesh, &params, 0.8, 100, 7).unwrap();
    assert!(lr.rank < d.p * d.m, "rank {}", lr.rank);

    let too_big = SimConfig { vertices: 2001, ..cfg.clone() };
    let big_mesh = build_disc_mesh(&too_big).unwrap();
    let x: Vec<f64> = d.x.clone();
    let big = RegressionDataset::new(
        Design::factorize(&x, d.n, d.p).unwrap(),
        Arc::new(InMemoryOutcomes::new(vec![0.0; d.n * 2001], d.n, 2001).unwrap()),
    )
    .unwrap();
    assert!(matches!(fit_oracle(&big, &big_mesh, &params, 10, 1), Err(crate::Error::Argument(_))));
}

#[test]
fn low_rank_is_no_better_than_oracle_on_average() {
    let mut diff = 0.0;
    for r in 0..10 {
        let (cfg, mesh, d) = oracle_case(200 + r);
        let ds = d.dataset().unwrap();
        let params = oracle_params(&cfg, cfg.beta_variance);
        let o = oracle_mean(&ds, &mesh, &params).unwrap();
        let l = fit_low_rank(&ds, &mesh, &params, 0.8, 10, 1).unwrap().mean;
        diff += crate::inference::mrse(&l, &d.beta).unwrap() - crate::inference::mrse(&o, &d.beta).unwrap();
    }
    assert!(diff >= 0.0, "{diff}");
}

#[test]
fn scoring_perfect_draws() {
    let (m, p, s) = (10, 2, 60);
    let truth: Vec<f64> = (0..p * m).map(|k| if k % 3 == 0 { 0.0 } else { 1.0 + k as f64 }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let beta: Vec<f64> = (0..s)
        .flat_map(|_| truth.iter().map(|t| t + 1e-3 * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>())
        .collect();
    let draws =
        PosteriorDraws::new(p, m, beta, vec![s], DrawsMeta { variant: Variant::Oracle, seed: 0, config_hash: 0 })
            .unwrap();
    let sc = score_draws(&draws, &truth).unwrap();
    assert!(sc.mrse < 1e-4);
    assert!((sc.mcc - 1.0).abs() < 1e-12);
    assert!(sc.band_subset);
    assert!(sc.cb80_vertex >= sc.cb80 - 1e-12);

    // one vertex far outside: the field is missed, most vertices are not
    let mut off = truth.clone();
    off[3] += 1.0;
    let sc = score_draws(&draws, &off).unwrap();
    assert!(sc.cb80 <= 0.5 + 1e-12);
    assert!(sc.cb80_vertex < 1.0 && sc.cb80_vertex >= sc.cb80);
}

#[test]
fn study_is_deterministic_and_records_failures() {
    let base = SimConfig { vertices: 60, n: 30, replicates: 2, seed: 11, ..SimConfig::default() };
    let opts = StudyOptions {
        methods: vec![Variant::Glm, Variant::GlmPs, Variant::Oracle, Variant::LowRank, Variant::Working],
        hmc: HmcConfig { warmup: 30, samples: 60, thin: 1, chains: 1, leapfrog_steps: 10, ..HmcConfig::default() },
        direct_draws: 100,
        ..StudyOptions::default()
    };
    let settings = [(Snr::High, 30), (Snr::Low, 2)];
    let a = run_study(&base, &settings, &opts).unwrap();
    let b = run_study(&base, &settings, &opts).unwrap();
    assert_eq!(a, b);
    let glm_fail = a.cell(Snr::Low, 2, Variant::Glm).unwrap();
    assert_eq!(glm_fail.failures(), 2);
    assert!(glm_fail.mrse().mean.is_nan());
    let ok = a.cell(Snr::High, 30, Variant::Oracle).unwrap();
    assert_eq!(ok.failures(), 0);
    let mut buf = Vec::new();
    a.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 5);
    assert!(text.contains("low,2,glm,2,2,,,,,,,,,,"));
}

#[test]
fn substreams_differ() {
    let s: std::collections::HashSet<u64> =
        (0..3).flat_map(|k| (0..5).flat_map(move |r| (0..8).map(move |m| substream_seed(1, k, r, m)))).collect();
    assert_eq!(s.len(), 3 * 5 * 8);
}
