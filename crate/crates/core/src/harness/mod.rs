//! Simulation study: disc meshes, thresholded-GP truth, the reference
//! methods and the scoring loop.

mod comparators;
mod sim;
mod study;

pub use comparators::{
    fit_glm, fit_glm_ps, fit_low_rank, fit_oracle, oracle_mean, LowRankFit, OracleParams, Smoother, DENSE_MAX_DIM,
};
pub use sim::{
    build_disc_mesh, simulate_dataset, FieldSampler, SimConfig, SimData, Snr, DENSE_TRUTH_MAX, TRUTH_RADIUS_MM,
};
pub use study::{
    fit_method, run_study, score_draws, spatial_setup, substream_seed, Score, SpatialSetup, StudyCell, StudyOptions,
    StudyResults, Summary,
};

#[cfg(test)]
mod tests;
