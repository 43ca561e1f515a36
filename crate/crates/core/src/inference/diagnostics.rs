use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use super::intervals::quantile;
use super::PosteriorDraws;
use crate::error::{Error, Result};

fn split(chains: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if chains.len() < 1 || chains.iter().any(|c| c.len() < 4) {
        return Err(Error::argument("split R-hat needs chains of at least 4 draws"));
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap() / 2;
    let halves: Vec<Vec<f64>> = chains
        .iter()
        .flat_map(|c| {
            let len = c.len();
            [c[..n].to_vec(), c[len - n..].to_vec()]
        })
        .collect();
    if halves.len() < 2 {
        return Err(Error::argument("split R-hat needs at least two split chains"));
    }
    Ok(halves)
}

/// Normal scores of pooled fractional ranks (average ranks for ties).
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(|c| c.len()).sum();
    let mut flat: Vec<(f64, usize)> = chains.iter().flatten().copied().zip(0..).collect();
    flat.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks = vec![0.0; total];
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j + 1 < total && flat[j + 1].0 == flat[i].0 {
            j += 1;
        }
        let r = 0.5 * ((i + 1) + (j + 1)) as f64;
        for item in &flat[i..=j] {
            ranks[item.1] = r;
        }
        i = j + 1;
    }
    let normal = Normal::standard();
    let mut out = Vec::with_capacity(chains.len());
    let mut k = 0;
    for c in chains {
        out.push(
            (0..c.len())
                .map(|_| {
                    let z = normal.inverse_cdf((ranks[k] - 0.375) / (total as f64 + 0.25));
                    k += 1;
                    z
                })
                .collect(),
        );
    }
    out
}

fn rhat_raw(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand) * (x - grand)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if !(w > 1e-300) {
        return 1.0;
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Rank-normalized split R̂. The folded version works on `|x - median|`.
pub fn split_rhat(chains: &[Vec<f64>], folded: bool) -> Result<f64> {
    let halves = split(chains)?;
    let input = if folded {
        let all: Vec<f64> = halves.iter().flatten().copied().collect();
        let med = quantile(&all, 0.5);
        halves.iter().map(|c| c.iter().map(|x| (x - med).abs()).collect()).collect()
    } else {
        halves
    };
    Ok(rhat_raw(&rank_normalize(&input)))
}

/// Maximum of folded and unfolded split R̂.
pub fn rhat_max(chains: &[Vec<f64>]) -> Result<f64> {
    Ok(split_rhat(chains, false)?.max(split_rhat(chains, true)?))
}

/// Effective sample size of split chains with Geyer's initial monotone
/// sequence. `rank` selects bulk-ESS (rank-normalized) over plain ESS.
pub fn effective_sample_size(chains: &[Vec<f64>], rank: bool) -> Result<f64> {
    let halves = split(chains)?;
    let c = if rank { rank_normalize(&halves) } else { halves };
    let m = c.len();
    let n = c[0].len();
    let means: Vec<f64> = c.iter().map(|x| x.iter().sum::<f64>() / n as f64).collect();
    let autocov = |lag: usize| -> Vec<f64> {
        c.iter()
            .zip(&means)
            .map(|(x, mu)| (0..n - lag).map(|t| (x[t] - mu) * (x[t + lag] - mu)).sum::<f64>() / n as f64)
            .collect()
    };
    let acov0 = autocov(0);
    let w = acov0.iter().map(|v| v * n as f64 / (n as f64 - 1.0)).sum::<f64>() / m as f64;
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = if m > 1 {
        n as f64 / (m as f64 - 1.0) * means.iter().map(|x| (x - grand) * (x - grand)).sum::<f64>()
    } else {
        0.0
    };
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    if !(var_plus > 1e-300) {
        return Ok((m * n) as f64);
    }
    let rho = |lag: usize| -> f64 {
        let ac = if lag == 0 { acov0.clone() } else { autocov(lag) };
        let mean_ac = ac.iter().sum::<f64>() / m as f64;
        1.0 - (w - mean_ac) / var_plus
    };
    // Geyer: sum pairs while positive, enforcing monotone decrease
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let mut pair = rho(t) + rho(t + 1);
        if pair < 0.0 {
            break;
        }
        if pair > prev_pair {
            pair = prev_pair;
        }
        tau += 2.0 * pair;
        prev_pair = pair;
        t += 2;
    }
    let tau = tau.max(1.0 / ((m * n) as f64).log10().max(1.0));
    Ok((m * n) as f64 / tau)
}

/// Monte Carlo standard error of the mean.
pub fn mcse_mean(chains: &[Vec<f64>]) -> Result<f64> {
    let all: Vec<f64> = chains.iter().flatten().copied().collect();
    let n = all.len() as f64;
    let mu = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1.0);
    Ok((var / effective_sample_size(chains, false)?).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarDiagnostic {
    pub coefficient: usize,
    pub vertex: usize,
    pub rhat: f64,
    pub rhat_folded: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub entries: Vec<ScalarDiagnostic>,
    pub max_rhat: f64,
    pub worst: ScalarDiagnostic,
    /// Fraction of scalars with max R̂ below 1.01.
    pub frac_below_101: f64,
}

/// Split R̂ for every coefficient-vertex scalar.
pub fn diagnose(draws: &PosteriorDraws) -> Result<DiagnosticsReport> {
    if draws.chain_lengths().len() < 2 && draws.chain_lengths()[0] < 8 {
        return Err(Error::argument("diagnostics need at least two chains or a chain of 8 draws"));
    }
    let (p, m) = (draws.p(), draws.m());
    let entries: Vec<Result<ScalarDiagnostic>> = (0..p * m)
        .into_par_iter()
        .map(|k| {
            let (j, s) = (k / m, k % m);
            let ch = draws.scalar_chains(j, s);
            Ok(ScalarDiagnostic {
                coefficient: j,
                vertex: s,
                rhat: split_rhat(&ch, false)?,
                rhat_folded: split_rhat(&ch, true)?,
            })
        })
        .collect();
    let entries: Vec<ScalarDiagnostic> = entries.into_iter().collect::<Result<_>>()?;
    let worst = *entries
        .iter()
        .max_by(|a, b| a.rhat.max(a.rhat_folded).total_cmp(&b.rhat.max(b.rhat_folded)))
        .expect("non-empty draws");
    let max_rhat = worst.rhat.max(worst.rhat_folded);
    let below = entries.iter().filter(|e| e.rhat.max(e.rhat_folded) < 1.01).count();
    Ok(DiagnosticsReport { frac_below_101: below as f64 / entries.len() as f64, entries, max_rhat, worst })
}
