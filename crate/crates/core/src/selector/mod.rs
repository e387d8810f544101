//! Weight-kurtosis statistics and the outlier-guided transform heuristic.

mod heuristic;
mod plan;
mod stats;

pub use heuristic::{
    beta_from_zmass, budget_split, candidate_set, group_scores, heuristic_from_scores,
    heuristic_select, random_assignments, random_plan, round_half_even, tail_thresholds, BetaMode,
    SelectorConfig,
};
pub use plan::{
    agreement, agreement_of, group_layers, HeuristicDiagnostics, PlanGroup, PlanGroupRecord, Provenance,
    SelectionPlan, Threshold, PLAN_VERSION,
};
pub(crate) use plan::check_version;
pub use stats::{
    kurtosis, kurtosis_of, layer_kurtosis, layer_outlier_score, median, robust_z, Kurtosis,
    OutlierScores, MAD_EPSILON, MAD_SCALE,
};
