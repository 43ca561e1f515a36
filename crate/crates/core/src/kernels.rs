//! Stationary isotropic correlation functions of geodesic distance.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;

use crate::error::{Error, Result};

/// Gram matrices larger than this get `nu` pulled away from 2.
pub const GRAM_CLAMP_SIZE: usize = 500;
const GRAM_NU_CLAMP: f64 = 1e-9;

/// Kernel families known to the registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    /// `exp(-psi * |a|^nu)`
    Rbf,
}

impl KernelFamily {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "rbf" => Ok(KernelFamily::Rbf),
            other => Err(Error::argument(format!("unknown kernel family '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Rbf => "rbf",
        }
    }
}

/// Two-parameter exponential radial basis correlation `exp(-psi * a^nu)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationModel {
    psi: f64,
    nu: f64,
}

impl CorrelationModel {
    pub fn new(psi: f64, nu: f64) -> Result<Self> {
        if !(psi > 0.0 && psi.is_finite()) {
            return Err(Error::argument(format!("psi must be positive, got {psi}")));
        }
        if !(nu > 0.0 && nu <= 2.0) {
            return Err(Error::argument(format!("nu must lie in (0, 2], got {nu}")));
        }
        Ok(CorrelationModel { psi, nu })
    }

    /// Kernel whose correlation falls to 1/2 at `fwhm / 2`.
    pub fn from_fwhm(fwhm: f64, nu: f64) -> Result<Self> {
        Self::new(fwhm_to_psi(fwhm, nu)?, nu)
    }

    pub fn psi(&self) -> f64 {
        self.psi
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn family(&self) -> KernelFamily {
        KernelFamily::Rbf
    }

    pub fn fwhm(&self) -> f64 {
        2.0 * (LN_2 / self.psi).powf(1.0 / self.nu)
    }

    pub fn evaluate(&self, alpha: f64) -> Result<f64> {
        if !(alpha >= 0.0) {
            return Err(Error::argument(format!("distance must be nonnegative, got {alpha}")));
        }
        Ok(self.corr(alpha))
    }

    #[inline]
    pub fn corr(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            1.0
        } else {
            (-self.psi * alpha.powf(self.nu)).exp()
        }
    }

    /// Copy used for building dense Gram matrices of `size` points.
    /// Large Gaussian-kernel Grams are numerically singular, so `nu` is
    /// nudged below 2 unless `allow_exact_gaussian` is set.
    pub fn for_gram(&self, size: usize, allow_exact_gaussian: bool) -> Self {
        if !allow_exact_gaussian && size > GRAM_CLAMP_SIZE && self.nu > 2.0 - GRAM_NU_CLAMP {
            CorrelationModel { psi: self.psi, nu: 2.0 - GRAM_NU_CLAMP }
        } else {
            *self
        }
    }

    /// Reads `kernel.psi` / `kernel.fwhm_mm` and `kernel.nu` from a key=value map.
    pub fn from_config(cfg: &BTreeMap<String, String>) -> Result<Option<Self>> {
        let get = |k: &str| -> Result<Option<f64>> {
            cfg.get(k)
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::argument(format!("{k}: cannot parse '{v}'"))))
                .transpose()
        };
        if let Some(fam) = cfg.get("kernel.family") {
            KernelFamily::from_name(fam.trim())?;
        }
        let psi = get("kernel.psi")?;
        let fwhm = get("kernel.fwhm_mm")?;
        let nu = get("kernel.nu")?;
        match (psi, fwhm, nu) {
            (Some(_), Some(_), _) => Err(Error::argument("specify kernel.psi or kernel.fwhm_mm, not both")),
            (Some(p), None, Some(n)) => Ok(Some(Self::new(p, n)?)),
            (None, Some(f), Some(n)) => Ok(Some(Self::from_fwhm(f, n)?)),
            (None, None, None) => Ok(None),
            _ => Err(Error::argument("kernel.nu must accompany kernel.psi or kernel.fwhm_mm")),
        }
    }
}

/// Bandwidth giving half-maximum at `fwhm / 2`.
pub fn fwhm_to_psi(fwhm: f64, nu: f64) -> Result<f64> {
    if !(fwhm > 0.0 && fwhm.is_finite()) {
        return Err(Error::argument(format!("fwhm must be positive, got {fwhm}")));
    }
    if !(nu > 0.0 && nu <= 2.0) {
        return Err(Error::argument(format!("nu must lie in (0, 2], got {nu}")));
    }
    Ok(LN_2 / (fwhm / 2.0).powf(nu))
}

pub fn psi_to_fwhm(psi: f64, nu: f64) -> Result<f64> {
    Ok(CorrelationModel::new(psi, nu)?.fwhm())
}
