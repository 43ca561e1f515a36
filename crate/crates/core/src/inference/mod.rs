//! Posterior summaries: intervals, simultaneous bands, activation maps,
//! convergence diagnostics and posterior predictive checks.

mod diagnostics;
mod draws;
mod gof;
mod intervals;
mod metrics;

pub use diagnostics::{
    diagnose, effective_sample_size, mcse_mean, rhat_max, split_rhat, DiagnosticsReport, ScalarDiagnostic,
};
pub use draws::{ChainSummary, DrawsMeta, PosteriorDraws, VarianceTrace, Variant};
pub use gof::{ks_normal, posterior_predictive_gof, GofOptions, GofReport, RegionGof, StatDiscrepancy, GOF_STATISTICS};
pub use intervals::{
    activation_from_band, activation_map, decide_nonzero, pointwise_intervals, quantile, quantile_sorted,
    simultaneous_band, simultaneous_band_from, ActivationLabel, BandStandardization, CredibleBand, PointwiseIntervals,
};
pub use metrics::{mcc, mcc_counts, mrse};
