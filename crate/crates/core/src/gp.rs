//! Exact Gaussian-process draws through a dense Cholesky factor, for
//! simulation truth and small oracles.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::sphere::SphericalMesh;
use crate::vecchia::CovarianceSpec;

/// Dense covariance `spec` over all vertex pairs, column-major.
pub fn dense_covariance(mesh: &SphericalMesh, spec: &CovarianceSpec) -> DMatrix<f64> {
    let m = mesh.len();
    DMatrix::from_fn(m, m, |a, b| spec.cov(mesh, a, b))
}

#[derive(Debug, Clone)]
pub struct DenseGp {
    chol: DMatrix<f64>,
}

impl DenseGp {
    /// Factorizes the covariance, adding diagonal jitter (relative
    /// `1e-10 .. 1e-6`) if needed.
    pub fn new(mesh: &SphericalMesh, spec: &CovarianceSpec) -> Result<Self> {
        let cov = dense_covariance(mesh, spec);
        let scale = cov.diagonal().max().max(f64::MIN_POSITIVE);
        let mut jitter = 0.0;
        loop {
            let mut c = cov.clone();
            for i in 0..c.nrows() {
                c[(i, i)] += jitter * scale;
            }
            if let Some(ch) = c.cholesky() {
                if jitter > 0.0 {
                    log::debug!("dense GP factor needed relative jitter {jitter:e}");
                }
                return Ok(DenseGp { chol: ch.l() });
            }
            jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
            if jitter > 1e-6 {
                return Err(Error::numerical("dense covariance is not positive definite"));
            }
        }
    }

    pub fn len(&self) -> usize {
        self.chol.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_fn(self.len(), |_, _| rng.sample(StandardNormal));
        (&self.chol * z).iter().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::CorrelationModel;
    use crate::sphere::fibonacci_sphere;
    use crate::vecchia::Nugget;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sample_covariance() {
        let mesh = fibonacci_sphere(6, 100.0).unwrap();
        let k = CorrelationModel::from_fwhm(80.0, 1.0).unwrap();
        let spec = CovarianceSpec { kernel: k, scale: 2.0, nugget: Nugget::Constant(0.1) };
        let gp = DenseGp::new(&mesh, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 40_000;
        let mut acc = vec![0.0; 36];
        for _ in 0..n {
            let x = gp.sample(&mut rng);
            for a in 0..6 {
                for b in 0..6 {
                    acc[a * 6 + b] += x[a] * x[b] / n as f64;
                }
            }
        }
        for a in 0..6 {
            for b in 0..6 {
                assert!((acc[a * 6 + b] - spec.cov(&mesh, a, b)).abs() < 0.06, "({a},{b})");
            }
        }
    }
}
