//! Design factorization, outcome streaming, sufficient statistics and the
//! shared parameter state for all model variants.
//!
//! Coefficient fields are stored coefficient-major: entry `(j, s)` of a
//! `rank x M` (or `P x M`) field lives at `j * M + s`.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative singular value cutoff below which design directions are dropped.
pub const RANK_TOL: f64 = 1e-10;

/// Thin SVD `X = U diag(d) Vᵀ` of an `N x P` design, rank-truncated.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    n: usize,
    p: usize,
    x: Vec<f64>,
    u: Vec<f64>,
    d: Vec<f64>,
    v: Vec<f64>,
}

impl Design {
    /// Factorizes a row-major `n x p` design.
    pub fn factorize(x: &[f64], n: usize, p: usize) -> Result<Self> {
        if n == 0 || p == 0 {
            return Err(Error::argument("design must have at least one row and one column"));
        }
        if x.len() != n * p {
            return Err(Error::argument(format!("design has {} entries, expected {}", x.len(), n * p)));
        }
        if let Some(k) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("design entry {} (row {}, column {}) is not finite", k, k / p, k % p)));
        }
        let mat = DMatrix::from_row_slice(n, p, x);
        let svd = mat.svd(true, true);
        let (u_full, vt_full) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let dmax = svd.singular_values.iter().copied().fold(0.0, f64::max);
        if dmax == 0.0 {
            return Err(Error::data("design matrix is identically zero"));
        }
        let keep: Vec<usize> = idx.into_iter().filter(|&i| svd.singular_values[i] >= RANK_TOL * dmax).collect();
        let k = keep.len();
        if k < p {
            log::warn!("design has rank {k} < {p} columns; dropping {} singular direction(s)", p - k);
        }
        let mut u = vec![0.0; n * k];
        let mut v = vec![0.0; p * k];
        let mut d = vec![0.0; k];
        for (c, &i) in keep.iter().enumerate() {
            d[c] = svd.singular_values[i];
            for r in 0..n {
                u[r * k + c] = u_full[(r, i)];
            }
            for r in 0..p {
                v[r * k + c] = vt_full[(i, r)];
            }
        }
        Ok(Design { n, p, x: x.to_vec(), u, d, v })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn rank(&self) -> usize {
        self.d.len()
    }

    /// Row-major `N x P` design.
    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    /// Row-major `N x rank`.
    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn u_row(&self, i: usize) -> &[f64] {
        let k = self.rank();
        &self.u[i * k..(i + 1) * k]
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.d
    }

    /// Row-major `P x rank`.
    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// `β = (V ⊗ I) γ`: maps a `rank x M` field to `P x M`.
    pub fn beta_from_gamma(&self, gamma: &[f64], m: usize) -> Vec<f64> {
        let k = self.rank();
        let mut beta = vec![0.0; self.p * m];
        for j in 0..self.p {
            for c in 0..k {
                let w = self.v[j * k + c];
                if w == 0.0 {
                    continue;
                }
                let (dst, src) = (&mut beta[j * m..(j + 1) * m], &gamma[c * m..(c + 1) * m]);
                for s in 0..m {
                    dst[s] += w * src[s];
                }
            }
        }
        beta
    }

    /// `γ = (Vᵀ ⊗ I) β`.
    pub fn gamma_from_beta(&self, beta: &[f64], m: usize) -> Vec<f64> {
        let k = self.rank();
        let mut gamma = vec![0.0; k * m];
        for c in 0..k {
            for j in 0..self.p {
                let w = self.v[j * k + c];
                let (dst, src) = (&mut gamma[c * m..(c + 1) * m], &beta[j * m..(j + 1) * m]);
                for s in 0..m {
                    dst[s] += w * src[s];
                }
            }
        }
        gamma
    }

    /// `Vᵀ diag(w) V` as a row-major `rank x rank` matrix.
    pub fn rotated_diag(&self, w: &[f64]) -> Vec<f64> {
        let k = self.rank();
        let mut g = vec![0.0; k * k];
        for a in 0..k {
            for b in 0..k {
                g[a * k + b] = (0..self.p).map(|j| self.v[j * k + a] * w[j] * self.v[j * k + b]).sum();
            }
        }
        g
    }
}

/// Single-pass access to outcome images, in design-row order.
pub trait OutcomeSource: Send + Sync {
    fn n_images(&self) -> usize;
    fn n_vertices(&self) -> usize;
    /// Calls `f(i, y_i)` for every image in order.
    fn for_each_image(&self, f: &mut dyn FnMut(usize, &[f64]) -> Result<()>) -> Result<()>;
}

/// Outcomes held in memory, row-major `N x M`.
#[derive(Debug, Clone, PartialEq)]
pub struct InMemoryOutcomes {
    n: usize,
    m: usize,
    data: Vec<f64>,
}

impl InMemoryOutcomes {
    pub fn new(data: Vec<f64>, n: usize, m: usize) -> Result<Self> {
        if data.len() != n * m {
            return Err(Error::data(format!("outcome buffer has {} values, expected {}", data.len(), n * m)));
        }
        Ok(InMemoryOutcomes { n, m, data })
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

impl OutcomeSource for InMemoryOutcomes {
    fn n_images(&self) -> usize {
        self.n
    }

    fn n_vertices(&self) -> usize {
        self.m
    }

    fn for_each_image(&self, f: &mut dyn FnMut(usize, &[f64]) -> Result<()>) -> Result<()> {
        for i in 0..self.n {
            f(i, self.image(i))?;
        }
        Ok(())
    }
}

/// Images produced on demand by a generator; nothing is stored.
pub struct GeneratedOutcomes<F> {
    n: usize,
    m: usize,
    generator: F,
}

impl<F> GeneratedOutcomes<F>
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    pub fn new(n: usize, m: usize, generator: F) -> Self {
        GeneratedOutcomes { n, m, generator }
    }
}

impl<F> OutcomeSource for GeneratedOutcomes<F>
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    fn n_images(&self) -> usize {
        self.n
    }

    fn n_vertices(&self) -> usize {
        self.m
    }

    fn for_each_image(&self, f: &mut dyn FnMut(usize, &[f64]) -> Result<()>) -> Result<()> {
        let mut buf = vec![0.0; self.m];
        for i in 0..self.n {
            (self.generator)(i, &mut buf);
            f(i, &buf)?;
        }
        Ok(())
    }
}

/// Design, factorization and outcome source for one analysis.
#[derive(Clone)]
pub struct RegressionDataset {
    pub design: Design,
    pub outcomes: Arc<dyn OutcomeSource>,
}

impl RegressionDataset {
    pub fn new(design: Design, outcomes: Arc<dyn OutcomeSource>) -> Result<Self> {
        if outcomes.n_images() != design.n() {
            return Err(Error::data(format!(
                "outcome source has {} images but design has {} rows",
                outcomes.n_images(),
                design.n()
            )));
        }
        Ok(RegressionDataset { design, outcomes })
    }

    pub fn n(&self) -> usize {
        self.design.n()
    }

    pub fn m(&self) -> usize {
        self.outcomes.n_vertices()
    }

    pub fn p(&self) -> usize {
        self.design.p()
    }

    pub fn sufficient_stats(&self) -> Result<SufficientStats> {
        SufficientStats::from_source(&self.design, self.outcomes.as_ref())
    }
}

/// `(Uᵀ ⊗ I) y` per vertex and per-vertex sums of squares.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    m: usize,
    d: Vec<f64>,
    projected: Vec<f64>,
    sumsq: Vec<f64>,
    n_images: usize,
}

/// Incremental single-pass accumulator.
pub struct StatsAccumulator<'a> {
    design: &'a Design,
    stats: SufficientStats,
    next: usize,
}

impl<'a> StatsAccumulator<'a> {
    pub fn new(design: &'a Design, m: usize) -> Self {
        let k = design.rank();
        StatsAccumulator {
            design,
            stats: SufficientStats {
                m,
                d: design.singular_values().to_vec(),
                projected: vec![0.0; k * m],
                sumsq: vec![0.0; m],
                n_images: 0,
            },
            next: 0,
        }
    }

    pub fn push(&mut self, y: &[f64]) -> Result<()> {
        let i = self.next;
        let m = self.stats.m;
        if i >= self.design.n() {
            return Err(Error::data(format!("image {i} exceeds the {} design rows", self.design.n())));
        }
        if y.len() != m {
            return Err(Error::data(format!("image {i} has {} values, expected {m}", y.len())));
        }
        if let Some(s) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("image {i} has a non-finite value at vertex {s}")));
        }
        for (c, &w) in self.design.u_row(i).iter().enumerate() {
            let row = &mut self.stats.projected[c * m..(c + 1) * m];
            for (acc, &v) in row.iter_mut().zip(y) {
                *acc += w * v;
            }
        }
        for (acc, &v) in self.stats.sumsq.iter_mut().zip(y) {
            *acc += v * v;
        }
        self.next += 1;
        self.stats.n_images = self.next;
        Ok(())
    }

    pub fn finish(self) -> Result<SufficientStats> {
        if self.next != self.design.n() {
            return Err(Error::data(format!("received {} images, design has {} rows", self.next, self.design.n())));
        }
        Ok(self.stats)
    }
}

impl SufficientStats {
    /// Streams `images` (in design-row order) once.
    pub fn stream<I, T>(design: &Design, m: usize, images: I) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[f64]>,
    {
        let mut acc = StatsAccumulator::new(design, m);
        for y in images {
            acc.push(y.as_ref())?;
        }
        acc.finish()
    }

    pub fn from_source(design: &Design, source: &dyn OutcomeSource) -> Result<Self> {
        let mut acc = StatsAccumulator::new(design, source.n_vertices());
        source.for_each_image(&mut |_, y| acc.push(y))?;
        acc.finish()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn rank(&self) -> usize {
        self.d.len()
    }

    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.d
    }

    /// Row-major `rank x M`.
    pub fn projected(&self) -> &[f64] {
        &self.projected
    }

    pub fn sumsq(&self) -> &[f64] {
        &self.sumsq
    }

    /// Per-vertex residual sum of squares at `gamma`, clamped at zero.
    pub fn residual_ss(&self, gamma: &[f64]) -> Vec<f64> {
        let (m, k) = (self.m, self.rank());
        let mut rss = self.sumsq.clone();
        for c in 0..k {
            let d = self.d[c];
            let (g, proj) = (&gamma[c * m..(c + 1) * m], &self.projected[c * m..(c + 1) * m]);
            for s in 0..m {
                rss[s] += d * g[s] * (d * g[s] - 2.0 * proj[s]);
            }
        }
        rss.iter_mut().for_each(|r| *r = r.max(0.0));
        rss
    }

    /// Working-model log likelihood (the `-(NM/2) log 2π` constant omitted).
    pub fn working_loglik(&self, state: &ChainState) -> Result<f64> {
        self.check_state(state)?;
        let rss = self.residual_ss(&state.gamma);
        let half_n = 0.5 * self.n_images as f64;
        Ok(rss.iter().zip(&state.sigma2).map(|(r, s2)| -0.5 * r / s2 - half_n * s2.ln()).sum())
    }

    fn check_state(&self, state: &ChainState) -> Result<()> {
        if state.gamma.len() != self.rank() * self.m {
            return Err(Error::State(format!(
                "gamma has {} entries, expected {}",
                state.gamma.len(),
                self.rank() * self.m
            )));
        }
        if state.sigma2.len() != self.m {
            return Err(Error::State("sigma2 length does not match vertex count".into()));
        }
        if state.sigma2.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::State("sigma2 must be positive".into()));
        }
        Ok(())
    }
}

/// Current values of all sampled quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    /// `rank x M` coefficients in the rotated basis.
    pub gamma: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub xi: f64,
    pub tau2: f64,
    /// Per-predictor prior scales, length `P`.
    pub zeta2: Vec<f64>,
}

impl ChainState {
    pub fn new(rank: usize, m: usize, p: usize, sigma2: f64) -> Self {
        ChainState { gamma: vec![0.0; rank * m], sigma2: vec![sigma2; m], xi: 1.0, tau2: 1.0, zeta2: vec![1.0; p] }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |x: f64| !(x > 0.0 && x.is_finite());
        if self.sigma2.iter().any(|&s| bad(s)) || bad(self.xi) || bad(self.tau2) || self.zeta2.iter().any(|&z| bad(z)) {
            return Err(Error::State("variance components must be positive and finite".into()));
        }
        if self.gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::State("gamma has non-finite entries".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn identity_design() {
        let n = 4;
        let x: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 }).collect();
        let d = Design::factorize(&x, n, n).unwrap();
        assert_eq!(d.rank(), 4);
        assert!(d.singular_values().iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn collinear_design_drops_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, 20);
        let b = randn(&mut rng, 20);
        let x: Vec<f64> = (0..20).flat_map(|i| [a[i], b[i], a[i]]).collect();
        let d = Design::factorize(&x, 20, 3).unwrap();
        assert_eq!(d.rank(), 2);
        assert!(Design::factorize(&vec![0.0; 6], 3, 2).is_err());
        assert!(Design::factorize(&[1.0, f64::NAN], 2, 1).is_err());
    }

    #[test]
    fn factorization_reconstructs_and_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, p) = (50, 7);
        let x = randn(&mut rng, n * p);
        let d = Design::factorize(&x, n, p).unwrap();
        let k = d.rank();
        let mut err = 0.0;
        let xnorm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..n {
            for j in 0..p {
                let rec: f64 = (0..k).map(|c| d.u()[i * k + c] * d.singular_values()[c] * d.v()[j * k + c]).sum();
                err += (rec - x[i * p + j]).powi(2);
            }
        }
        assert!(err.sqrt() <= 1e-10 * xnorm);
        for a in 0..k {
            for b in 0..k {
                let uu: f64 = (0..n).map(|i| d.u()[i * k + a] * d.u()[i * k + b]).sum();
                let vv: f64 = (0..p).map(|j| d.v()[j * k + a] * d.v()[j * k + b]).sum();
                let e = if a == b { 1.0 } else { 0.0 };
                assert!((uu - e).abs() < 1e-10 && (vv - e).abs() < 1e-10);
            }
        }
        assert!(d.singular_values().windows(2).all(|w| w[0] >= w[1]));
        let beta = randn(&mut rng, p * 5);
        let back = d.beta_from_gamma(&d.gamma_from_beta(&beta, 5), 5);
        for (a, b) in beta.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stats_single_image() {
        let d = Design::factorize(&[1.0], 1, 1).unwrap();
        let y = vec![1.0, -2.0, 3.0];
        let st = SufficientStats::stream(&d, 3, [&y]).unwrap();
        let sign = d.u()[0];
        for s in 0..3 {
            assert!((st.projected()[s] - sign * y[s]).abs() < 1e-15);
            assert_eq!(st.sumsq()[s], y[s] * y[s]);
        }
    }

    #[test]
    fn stats_two_identical_images() {
        let d = Design::factorize(&[1.0, 1.0], 2, 1).unwrap();
        let y = vec![0.5, 2.0];
        let st = SufficientStats::stream(&d, 2, [&y, &y]).unwrap();
        for s in 0..2 {
            assert!((st.projected()[s].abs() - 2f64.sqrt() * y[s].abs()).abs() < 1e-14);
            assert!((st.sumsq()[s] - 2.0 * y[s] * y[s]).abs() < 1e-14);
        }
    }

    #[test]
    fn stats_errors() {
        let d = Design::factorize(&[1.0, 1.0], 2, 1).unwrap();
        let err = SufficientStats::stream(&d, 2, [vec![1.0, 2.0]]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        let err = SufficientStats::stream(&d, 2, [vec![1.0, 2.0], vec![1.0]]).unwrap_err();
        assert!(err.to_string().contains("image 1"));
        let err = SufficientStats::stream(&d, 2, [vec![1.0, 2.0], vec![1.0, f64::INFINITY]]).unwrap_err();
        assert!(err.to_string().contains("image 1"));
        let err = SufficientStats::stream(&d, 2, [vec![1.0, 2.0], vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap_err();
        assert!(err.to_string().contains("image 2"));
    }

    #[test]
    fn stats_match_dense_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, m, p) = (20, 100, 3);
        let d = Design::factorize(&randn(&mut rng, n * p), n, p).unwrap();
        let y = randn(&mut rng, n * m);
        let st = SufficientStats::stream(&d, m, y.chunks(m)).unwrap();
        for c in 0..3 {
            for s in 0..m {
                let dense: f64 = (0..n).map(|i| d.u()[i * 3 + c] * y[i * m + s]).sum();
                assert!((dense - st.projected()[c * m + s]).abs() < 1e-12);
            }
        }
        // order insensitivity: reversed rows with reversed design
        let xr: Vec<f64> = (0..n).rev().flat_map(|i| d.x_row(i).to_vec()).collect();
        let dr = Design::factorize(&xr, n, p).unwrap();
        let yr: Vec<&[f64]> = y.chunks(m).rev().collect();
        let str_ = SufficientStats::stream(&dr, m, yr).unwrap();
        for s in 0..m {
            assert!((st.sumsq()[s] - str_.sumsq()[s]).abs() <= 1e-8 * st.sumsq()[s]);
        }
    }

    #[test]
    fn loglik_and_rss_against_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, m, p) = (10, 30, 2);
        let x = randn(&mut rng, n * p);
        let d = Design::factorize(&x, n, p).unwrap();
        let y = randn(&mut rng, n * m);
        let st = SufficientStats::stream(&d, m, y.chunks(m)).unwrap();
        let beta = randn(&mut rng, p * m);
        let mut state = ChainState::new(2, m, p, 1.0);
        state.gamma = d.gamma_from_beta(&beta, m);
        state.sigma2 = (0..m).map(|s| 0.5 + s as f64 / m as f64).collect();
        let mut direct = 0.0;
        let rss = st.residual_ss(&state.gamma);
        for s in 0..m {
            let mut r2 = 0.0;
            for i in 0..n {
                let fit: f64 = (0..p).map(|j| x[i * p + j] * beta[j * m + s]).sum();
                r2 += (y[i * m + s] - fit).powi(2);
            }
            assert!((rss[s] - r2).abs() <= 1e-10 * r2.max(1e-300));
            direct += -0.5 * r2 / state.sigma2[s] - 0.5 * n as f64 * state.sigma2[s].ln();
        }
        let ll = st.working_loglik(&state).unwrap();
        assert!(((ll - direct) / direct).abs() < 1e-10);

        state.gamma.iter_mut().for_each(|g| *g = 0.0);
        let zero = st.working_loglik(&state).unwrap();
        let expect: f64 =
            (0..m).map(|s| -0.5 * st.sumsq()[s] / state.sigma2[s] - 0.5 * n as f64 * state.sigma2[s].ln()).sum();
        assert!((zero - expect).abs() < 1e-10 * expect.abs());
        state.sigma2[0] = 0.0;
        assert!(st.working_loglik(&state).is_err());
    }

    #[test]
    fn hand_example_single_vertex() {
        // y = (1, 2), x = (1, 1), sigma2 = 1, beta = 1.2
        let d = Design::factorize(&[1.0, 1.0], 2, 1).unwrap();
        let st = SufficientStats::stream(&d, 1, [[1.0], [2.0]]).unwrap();
        let mut state = ChainState::new(1, 1, 1, 1.0);
        state.gamma = d.gamma_from_beta(&[1.2], 1);
        let direct = -0.5 * ((1.0f64 - 1.2).powi(2) + (2.0f64 - 1.2).powi(2));
        assert!((st.working_loglik(&state).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn interpolating_fit_has_zero_rss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, m) = (3, 4);
        let x = randn(&mut rng, n * n);
        let d = Design::factorize(&x, n, n).unwrap();
        let beta = randn(&mut rng, n * m);
        let y: Vec<f64> = (0..n)
            .flat_map(|i| {
                (0..m).map(|s| (0..n).map(|j| x[i * n + j] * beta[j * m + s]).sum::<f64>()).collect::<Vec<_>>()
            })
            .collect();
        let st = SufficientStats::stream(&d, m, y.chunks(m)).unwrap();
        let rss = st.residual_ss(&d.gamma_from_beta(&beta, m));
        assert!(rss.iter().all(|r| *r < 1e-10));
        assert_eq!(st.residual_ss(&vec![0.0; n * m]), st.sumsq());
    }

    #[test]
    fn loglik_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, m, p) = (6, 8, 2);
        let d = Design::factorize(&randn(&mut rng, n * p), n, p).unwrap();
        let y = randn(&mut rng, n * m);
        let perm: Vec<usize> = (0..m).rev().collect();
        let yp: Vec<f64> = (0..n).flat_map(|i| perm.iter().map(|&s| y[i * m + s]).collect::<Vec<_>>()).collect();
        let st = SufficientStats::stream(&d, m, y.chunks(m)).unwrap();
        let stp = SufficientStats::stream(&d, m, yp.chunks(m)).unwrap();
        let mut state = ChainState::new(2, m, p, 1.0);
        state.gamma = randn(&mut rng, 2 * m);
        state.sigma2 = (0..m).map(|s| 1.0 + s as f64).collect();
        let mut sp = state.clone();
        for c in 0..2 {
            for (t, &s) in perm.iter().enumerate() {
                sp.gamma[c * m + t] = state.gamma[c * m + s];
            }
        }
        sp.sigma2 = perm.iter().map(|&s| state.sigma2[s]).collect();
        let a = st.working_loglik(&state).unwrap();
        let b = stp.working_loglik(&sp).unwrap();
        assert!((a - b).abs() < 1e-10 * a.abs());
    }
}
