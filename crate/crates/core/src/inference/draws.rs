use crate::error::{Error, Result};

/// Which fitting procedure produced a set of draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Working,
    Marginal,
    Conditional,
    Glm,
    GlmPs,
    Oracle,
    LowRank,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Working => "working",
            Variant::Marginal => "marginal",
            Variant::Conditional => "conditional",
            Variant::Glm => "glm",
            Variant::GlmPs => "glm-ps",
            Variant::Oracle => "oracle",
            Variant::LowRank => "low-rank",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Ok(match s {
            "working" => Variant::Working,
            "marginal" => Variant::Marginal,
            "conditional" => Variant::Conditional,
            "glm" => Variant::Glm,
            "glm-ps" => Variant::GlmPs,
            "oracle" => Variant::Oracle,
            "low-rank" => Variant::LowRank,
            other => return Err(Error::argument(format!("unknown method '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrawsMeta {
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: u64,
}

/// Scalar variance components recorded with each retained draw.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceTrace {
    pub tau2: f64,
    pub xi: f64,
    pub zeta2: Vec<f64>,
}

/// Per-chain sampler summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainSummary {
    pub step_size: f64,
    pub accept_rate: f64,
}

/// Retained coefficient draws, `S x P x M`, grouped by chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    p: usize,
    m: usize,
    beta: Vec<f64>,
    chain_lengths: Vec<usize>,
    /// Optional `S x M` noise variance draws.
    pub sigma2: Option<Vec<f64>>,
    pub traces: Vec<VarianceTrace>,
    pub chains: Vec<ChainSummary>,
    pub meta: DrawsMeta,
}

impl PosteriorDraws {
    pub fn new(p: usize, m: usize, beta: Vec<f64>, chain_lengths: Vec<usize>, meta: DrawsMeta) -> Result<Self> {
        let s: usize = chain_lengths.iter().sum();
        if p == 0 || m == 0 {
            return Err(Error::argument("draws need at least one coefficient and one vertex"));
        }
        if beta.len() != s * p * m {
            return Err(Error::argument(format!("draw buffer has {} values, expected {s} x {p} x {m}", beta.len())));
        }
        if s < 2 {
            return Err(Error::argument("at least two draws are required"));
        }
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("posterior draws contain non-finite values"));
        }
        Ok(PosteriorDraws { p, m, beta, chain_lengths, sigma2: None, traces: vec![], chains: vec![], meta })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_draws(&self) -> usize {
        self.chain_lengths.iter().sum()
    }

    pub fn chain_lengths(&self) -> &[usize] {
        &self.chain_lengths
    }

    pub fn raw(&self) -> &[f64] {
        &self.beta
    }

    /// Draw `d` as a `P x M` field.
    pub fn draw(&self, d: usize) -> &[f64] {
        let w = self.p * self.m;
        &self.beta[d * w..(d + 1) * w]
    }

    /// Draw `d` of coefficient `j` over all vertices.
    pub fn coef_draw(&self, d: usize, j: usize) -> &[f64] {
        let base = d * self.p * self.m + j * self.m;
        &self.beta[base..base + self.m]
    }

    /// All draws of coefficient `j`, `S x M` row-major.
    pub fn coefficient(&self, j: usize) -> Vec<f64> {
        (0..self.n_draws()).flat_map(|d| self.coef_draw(d, j).iter().copied()).collect()
    }

    /// Draws of one scalar `(j, s)` split by chain.
    pub fn scalar_chains(&self, j: usize, s: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.chain_lengths.len());
        let mut d = 0;
        for &len in &self.chain_lengths {
            out.push((d..d + len).map(|t| self.coef_draw(t, j)[s]).collect());
            d += len;
        }
        out
    }

    /// Posterior mean, `P x M`.
    pub fn mean(&self) -> Vec<f64> {
        let w = self.p * self.m;
        let mut acc = vec![0.0; w];
        for d in 0..self.n_draws() {
            for (a, v) in acc.iter_mut().zip(self.draw(d)) {
                *a += v;
            }
        }
        let s = self.n_draws() as f64;
        acc.iter_mut().for_each(|a| *a /= s);
        acc
    }

    /// Posterior standard deviation, `P x M`.
    pub fn sd(&self) -> Vec<f64> {
        let mean = self.mean();
        let mut acc = vec![0.0; mean.len()];
        for d in 0..self.n_draws() {
            for ((a, v), mu) in acc.iter_mut().zip(self.draw(d)).zip(&mean) {
                *a += (v - mu) * (v - mu);
            }
        }
        let s = (self.n_draws() - 1) as f64;
        acc.iter_mut().for_each(|a| *a = (*a / s).sqrt());
        acc
    }

    /// Posterior mean of the noise variances, if recorded.
    pub fn sigma2_mean(&self) -> Option<Vec<f64>> {
        let s2 = self.sigma2.as_ref()?;
        let s = self.n_draws();
        let mut acc = vec![0.0; self.m];
        for d in 0..s {
            for (a, v) in acc.iter_mut().zip(&s2[d * self.m..(d + 1) * self.m]) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= s as f64);
        Some(acc)
    }
}
