//! Trial scoring and detection metrics.

mod metrics;
mod norm;
mod trials;

pub use metrics::{
    eer, eer_from_points, min_dcf, min_dcf_from_points, operating_points, operating_points_csv, DcfConfig,
    OperatingPoint, ScoreSet,
};
pub use norm::{as_norm, as_norm_with, cosine, cosine_score, Cohort, CohortStats, SIGMA_FLOOR};
pub use trials::{all_pairs_trials, evaluate, EmbeddingSet, Evaluation, ScoredTrial, Trial, TrialList};
