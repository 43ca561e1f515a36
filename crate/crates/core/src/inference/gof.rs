use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use super::intervals::quantile_sorted;
use super::PosteriorDraws;
use crate::error::{Error, Result};
use crate::model::RegressionDataset;

pub const GOF_STATISTICS: [&str; 3] = ["mean", "q10", "q90"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GofOptions {
    pub replicates: usize,
    pub seed: u64,
}

impl Default for GofOptions {
    fn default() -> Self {
        GofOptions { replicates: 100, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatDiscrepancy {
    pub name: &'static str,
    pub observed: f64,
    pub predictive_mean: f64,
    pub predictive_sd: f64,
    /// `|observed - predictive mean|`.
    pub discrepancy: f64,
    /// Fraction of replicates with statistic ≥ observed.
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionGof {
    pub label: u32,
    pub n_vertices: usize,
    pub stats: Vec<StatDiscrepancy>,
    /// Kolmogorov-Smirnov distance of standardized residuals to N(0, 1).
    pub ks: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GofReport {
    pub regions: Vec<RegionGof>,
    /// Region labels with the smallest, median and largest KS distance.
    pub best: u32,
    pub median: u32,
    pub worst: u32,
}

fn region_stats(values: &mut [f64]) -> [f64; 3] {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.sort_by(f64::total_cmp);
    [mean, quantile_sorted(values, 0.1), quantile_sorted(values, 0.9)]
}

/// Kolmogorov-Smirnov distance between a sample and the standard normal.
pub fn ks_normal(sample: &[f64]) -> f64 {
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let normal = Normal::standard();
    v.iter()
        .enumerate()
        .map(|(i, x)| {
            let f = normal.cdf(*x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Posterior predictive checks per region under the working likelihood.
pub fn posterior_predictive_gof(
    draws: &PosteriorDraws,
    dataset: &RegressionDataset,
    labels: &[u32],
    opts: GofOptions,
) -> Result<GofReport> {
    let (n, m, p) = (dataset.n(), dataset.m(), dataset.p());
    if labels.len() != m {
        return Err(Error::data(format!("region labels cover {} vertices, data has {m}", labels.len())));
    }
    if draws.m() != m || draws.p() != p {
        return Err(Error::argument("draws do not match the dataset dimensions"));
    }
    let sigma2 = draws.sigma2.as_ref().ok_or_else(|| Error::argument("predictive checks need noise variance draws"))?;
    if opts.replicates == 0 {
        return Err(Error::argument("at least one predictive replicate is required"));
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (s, l) in labels.iter().enumerate() {
        groups.entry(*l).or_default().push(s);
    }
    let region_of: Vec<usize> = {
        let keys: Vec<u32> = groups.keys().copied().collect();
        labels.iter().map(|l| keys.binary_search(l).unwrap()).collect()
    };
    let sizes: Vec<usize> = groups.values().map(|v| v.len()).collect();
    let nreg = sizes.len();

    let x = dataset.design.x();
    let beta_bar = draws.mean();
    let sigma_bar: Vec<f64> = draws.sigma2_mean().unwrap().iter().map(|v| v.sqrt()).collect();
    let fitted = |beta: &[f64], i: usize, s: usize| -> f64 { (0..p).map(|j| x[i * p + j] * beta[j * m + s]).sum() };

    let mut observed: Vec<Vec<f64>> = sizes.iter().map(|k| Vec::with_capacity(k * n)).collect();
    let mut resid: Vec<Vec<f64>> = sizes.iter().map(|k| Vec::with_capacity(k * n)).collect();
    dataset.outcomes.for_each_image(&mut |i, y| {
        for s in 0..m {
            let r = region_of[s];
            observed[r].push(y[s]);
            resid[r].push((y[s] - fitted(&beta_bar, i, s)) / sigma_bar[s].max(1e-300));
        }
        Ok(())
    })?;
    let obs_stats: Vec<[f64; 3]> = observed.iter_mut().map(|v| region_stats(v)).collect();
    drop(observed);

    let total = draws.n_draws();
    let reps: Vec<Vec<[f64; 3]>> = (0..opts.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(r as u64);
            let d = (r * total) / opts.replicates;
            let beta = draws.draw(d);
            let sd: Vec<f64> = sigma2[d * m..(d + 1) * m].iter().map(|v| v.sqrt()).collect();
            let mut vals: Vec<Vec<f64>> = sizes.iter().map(|k| Vec::with_capacity(k * n)).collect();
            for i in 0..n {
                for s in 0..m {
                    let e: f64 = rng.sample(StandardNormal);
                    vals[region_of[s]].push(fitted(beta, i, s) + sd[s] * e);
                }
            }
            vals.iter_mut().map(|v| region_stats(v)).collect()
        })
        .collect();

    let mut regions = Vec::with_capacity(nreg);
    for (r, (&label, _)) in groups.iter().enumerate() {
        let stats = (0..3)
            .map(|k| {
                let vals: Vec<f64> = reps.iter().map(|rep| rep[r][k]).collect();
                let mu = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = if vals.len() > 1 {
                    vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (vals.len() - 1) as f64
                } else {
                    0.0
                };
                let obs = obs_stats[r][k];
                StatDiscrepancy {
                    name: GOF_STATISTICS[k],
                    observed: obs,
                    predictive_mean: mu,
                    predictive_sd: var.sqrt(),
                    discrepancy: (obs - mu).abs(),
                    p_value: vals.iter().filter(|v| **v >= obs).count() as f64 / vals.len() as f64,
                }
            })
            .collect();
        regions.push(RegionGof { label, n_vertices: sizes[r], stats, ks: ks_normal(&resid[r]) });
    }
    let mut order: Vec<usize> = (0..nreg).collect();
    order.sort_by(|a, b| regions[*a].ks.total_cmp(&regions[*b].ks));
    let best = regions[order[0]].label;
    let median = regions[order[nreg / 2]].label;
    let worst = regions[order[nreg - 1]].label;
    Ok(GofReport { regions, best, median, worst })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::inference::{DrawsMeta, Variant};
    use crate::model::{Design, InMemoryOutcomes};

    fn setup(n: usize, m: usize, seed: u64) -> (RegressionDataset, PosteriorDraws) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = 2;
        let x: Vec<f64> = (0..n).flat_map(|i| [1.0, (i as f64 * 0.37).sin()]).collect();
        let beta: Vec<f64> = (0..p * m).map(|k| (k as f64 * 0.11).cos()).collect();
        let sd: Vec<f64> = (0..m).map(|s| 0.5 + 0.01 * s as f64).collect();
        let mut y = vec![0.0; n * m];
        for i in 0..n {
            for s in 0..m {
                let mu = x[i * p] * beta[s] + x[i * p + 1] * beta[m + s];
                y[i * m + s] = mu + sd[s] * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let design = Design::factorize(&x, n, p).unwrap();
        let ds = RegressionDataset::new(design, Arc::new(InMemoryOutcomes::new(y, n, m).unwrap())).unwrap();
        let s = 50;
        let bd: Vec<f64> = (0..s).flat_map(|_| beta.iter().copied()).collect();
        let mut draws =
            PosteriorDraws::new(p, m, bd, vec![s], DrawsMeta { variant: Variant::Working, seed: 0, config_hash: 0 })
                .unwrap();
        draws.sigma2 = Some((0..s).flat_map(|_| sd.iter().map(|v| v * v)).collect());
        (ds, draws)
    }

    #[test]
    fn self_consistent_model_is_calibrated() {
        let (ds, draws) = setup(40, 200, 1);
        let labels: Vec<u32> = (0..200).map(|s| (s / 10) as u32).collect();
        let rep = posterior_predictive_gof(&draws, &ds, &labels, GofOptions { replicates: 200, seed: 3 }).unwrap();
        assert_eq!(rep.regions.len(), 20);
        let ok = rep.regions.iter().flat_map(|r| r.stats.iter()).filter(|s| (0.01..=0.99).contains(&s.p_value)).count();
        assert!(ok as f64 >= 0.95 * 60.0, "{ok} of 60 statistics inside");
        assert!(rep.regions.iter().all(|r| r.ks < 0.1));
    }

    #[test]
    fn mean_discrepancy_shrinks_with_replicates() {
        let (ds, draws) = setup(30, 50, 2);
        let labels = vec![0u32; 50];
        let rep = posterior_predictive_gof(&draws, &ds, &labels, GofOptions { replicates: 400, seed: 4 }).unwrap();
        let mean = &rep.regions[0].stats[0];
        assert!(mean.discrepancy < 3.0 * mean.predictive_sd);
        assert_eq!(rep.best, 0);
    }

    #[test]
    fn requires_labels_and_sigma() {
        let (ds, mut draws) = setup(10, 20, 3);
        assert!(posterior_predictive_gof(&draws, &ds, &[0; 19], GofOptions::default()).is_err());
        draws.sigma2 = None;
        assert!(posterior_predictive_gof(&draws, &ds, &[0; 20], GofOptions::default()).is_err());
    }

    #[test]
    fn ks_of_normal_sample_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..5000).map(|_| rng.sample(StandardNormal)).collect();
        assert!(ks_normal(&x) < 0.03);
        let shifted: Vec<f64> = x.iter().map(|v| v + 1.0).collect();
        assert!(ks_normal(&shifted) > 0.3);
    }
}
