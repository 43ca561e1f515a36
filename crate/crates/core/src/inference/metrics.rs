use crate::error::{Error, Result};

/// Matthews correlation coefficient; 0 when any marginal count is zero.
pub fn mcc(decisions: &[bool], truth: &[bool]) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::argument("mcc of empty input"));
    }
    if decisions.len() != truth.len() {
        return Err(Error::argument("decision and truth lengths differ"));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    for (d, t) in decisions.iter().zip(truth) {
        match (d, t) {
            (true, true) => tp += 1.0,
            (false, false) => tn += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
        }
    }
    Ok(mcc_counts(tp, tn, fp, fn_))
}

pub fn mcc_counts(tp: f64, tn: f64, fp: f64, fn_: f64) -> f64 {
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / den.sqrt()
}

/// Relative squared error in percent, over all coefficients and vertices.
pub fn mrse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::argument("estimate and truth lengths differ"));
    }
    let den: f64 = truth.iter().map(|t| t * t).sum();
    if !(den > 0.0) {
        return Err(Error::argument("mrse undefined for an all-zero truth"));
    }
    let num: f64 = estimate.iter().zip(truth).map(|(e, t)| (e - t) * (e - t)).sum();
    Ok(100.0 * num / den)
}
