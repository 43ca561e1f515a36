use super::PosteriorDraws;
use crate::error::{Error, Result};

const SCALE_FLOOR: f64 = 1e-12;

/// Linear-interpolation quantile of sorted data (type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(data: &[f64], q: f64) -> f64 {
    let mut v = data.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::argument(format!("credible level must lie in (0, 1), got {level}")));
    }
    Ok(())
}

/// Equal-tailed pointwise intervals, `P x M` each.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseIntervals {
    pub level: f64,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl PointwiseIntervals {
    /// Intervals that exclude zero.
    pub fn excludes_zero(&self) -> Vec<bool> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| *l > 0.0 || *h < 0.0).collect()
    }

    /// Fraction of entries of `truth` inside their interval.
    pub fn coverage(&self, truth: &[f64]) -> f64 {
        let inside =
            truth.iter().zip(self.lo.iter().zip(&self.hi)).filter(|(t, (l, h))| **t >= **l && **t <= **h).count();
        inside as f64 / truth.len().max(1) as f64
    }
}

/// Per-vertex empirical quantiles at `(1-level)/2` and `(1+level)/2`.
pub fn pointwise_intervals(draws: &PosteriorDraws, level: f64) -> Result<PointwiseIntervals> {
    check_level(level)?;
    let s = draws.n_draws();
    if s < 20 {
        return Err(Error::argument(format!("pointwise intervals need at least 20 draws, got {s}")));
    }
    let w = draws.p() * draws.m();
    let (ql, qh) = (0.5 * (1.0 - level), 0.5 * (1.0 + level));
    let mut lo = vec![0.0; w];
    let mut hi = vec![0.0; w];
    let mut col = vec![0.0; s];
    for k in 0..w {
        for (d, c) in col.iter_mut().enumerate() {
            *c = draws.raw()[d * w + k];
        }
        col.sort_by(f64::total_cmp);
        lo[k] = quantile_sorted(&col, ql);
        hi[k] = quantile_sorted(&col, qh);
    }
    Ok(PointwiseIntervals { level, lo, hi })
}

/// How the band is centered and scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BandStandardization {
    #[default]
    MeanSd,
    /// Median and 1.4826·MAD; more robust to heavy-tailed draws.
    MedianMad,
}

/// Simultaneous band `center ± multiplier·scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct CredibleBand {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub multiplier: f64,
    /// Joint coverage, e.g. 0.8.
    pub level: f64,
}

impl CredibleBand {
    pub fn lower(&self) -> Vec<f64> {
        self.center.iter().zip(&self.scale).map(|(c, s)| c - self.multiplier * s).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.center.iter().zip(&self.scale).map(|(c, s)| c + self.multiplier * s).collect()
    }

    /// Whether `field` lies inside the band at every vertex.
    pub fn contains(&self, field: &[f64]) -> bool {
        field.iter().zip(self.center.iter().zip(&self.scale)).all(|(f, (c, s))| (f - c).abs() <= self.multiplier * s)
    }

    /// Number of vertices where `field` lies inside the band.
    pub fn count_inside(&self, field: &[f64]) -> usize {
        field
            .iter()
            .zip(self.center.iter().zip(&self.scale))
            .filter(|(f, (c, s))| (*f - *c).abs() <= self.multiplier * *s)
            .count()
    }
}

/// Band from `S x M` draws of one coefficient. The multiplier is the
/// `level` empirical quantile (order statistic) of the per-draw maximum
/// standardized deviation.
pub fn simultaneous_band_from(samples: &[f64], m: usize, level: f64, how: BandStandardization) -> Result<CredibleBand> {
    check_level(level)?;
    if m == 0 || samples.len() % m != 0 {
        return Err(Error::argument("band draws must be an S x M buffer"));
    }
    let s = samples.len() / m;
    if s < 50 {
        return Err(Error::argument(format!("simultaneous bands need at least 50 draws, got {s}")));
    }
    let mut center = vec![0.0; m];
    let mut scale = vec![0.0; m];
    let mut col = vec![0.0; s];
    for v in 0..m {
        for (d, c) in col.iter_mut().enumerate() {
            *c = samples[d * m + v];
        }
        match how {
            BandStandardization::MeanSd => {
                let mu = col.iter().sum::<f64>() / s as f64;
                let var = col.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (s - 1) as f64;
                center[v] = mu;
                scale[v] = var.sqrt();
            }
            BandStandardization::MedianMad => {
                col.sort_by(f64::total_cmp);
                let med = quantile_sorted(&col, 0.5);
                let mut dev: Vec<f64> = col.iter().map(|x| (x - med).abs()).collect();
                dev.sort_by(f64::total_cmp);
                center[v] = med;
                scale[v] = 1.4826 * quantile_sorted(&dev, 0.5);
            }
        }
        scale[v] = scale[v].max(SCALE_FLOOR);
    }
    let mut maxes: Vec<f64> = (0..s)
        .map(|d| {
            let row = &samples[d * m..(d + 1) * m];
            row.iter().zip(center.iter().zip(&scale)).map(|(x, (c, sc))| (x - c).abs() / sc).fold(0.0, f64::max)
        })
        .collect();
    maxes.sort_by(f64::total_cmp);
    let k = ((level * s as f64).ceil() as usize).clamp(1, s);
    let multiplier = maxes[k - 1].max(f64::MIN_POSITIVE);
    Ok(CredibleBand { center, scale, multiplier, level })
}

/// Mean/sd band for coefficient `j`.
pub fn simultaneous_band(draws: &PosteriorDraws, j: usize, level: f64) -> Result<CredibleBand> {
    if j >= draws.p() {
        return Err(Error::argument(format!("coefficient {j} out of range")));
    }
    simultaneous_band_from(&draws.coefficient(j), draws.m(), level, BandStandardization::MeanSd)
}

/// `true` where zero lies outside the band.
pub fn decide_nonzero(band: &CredibleBand) -> Vec<bool> {
    band.center
        .iter()
        .zip(&band.scale)
        .map(|(c, s)| {
            let (lo, hi) = (c - band.multiplier * s, c + band.multiplier * s);
            lo > 0.0 || hi < 0.0
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationLabel {
    PositiveCore,
    NegativeCore,
    PositiveMean,
    NegativeMean,
    Null,
}

impl ActivationLabel {
    pub fn name(self) -> &'static str {
        match self {
            ActivationLabel::PositiveCore => "positive-core",
            ActivationLabel::NegativeCore => "negative-core",
            ActivationLabel::PositiveMean => "positive-mean",
            ActivationLabel::NegativeMean => "negative-mean",
            ActivationLabel::Null => "null",
        }
    }
}

/// Labels vertices by where the band sits relative to `±threshold`.
pub fn activation_from_band(band: &CredibleBand, threshold: f64) -> Result<Vec<ActivationLabel>> {
    if !(threshold >= 0.0) {
        return Err(Error::argument("activation threshold must be nonnegative"));
    }
    Ok(band
        .center
        .iter()
        .zip(&band.scale)
        .map(|(c, s)| {
            let (lo, hi) = (c - band.multiplier * s, c + band.multiplier * s);
            if lo > threshold {
                ActivationLabel::PositiveCore
            } else if hi < -threshold {
                ActivationLabel::NegativeCore
            } else if *c > threshold {
                ActivationLabel::PositiveMean
            } else if *c < -threshold {
                ActivationLabel::NegativeMean
            } else {
                ActivationLabel::Null
            }
        })
        .collect())
}

/// Activation map for coefficient `j` with a simultaneous band at `level`.
pub fn activation_map(draws: &PosteriorDraws, j: usize, threshold: f64, level: f64) -> Result<Vec<ActivationLabel>> {
    activation_from_band(&simultaneous_band(draws, j, level)?, threshold)
}
