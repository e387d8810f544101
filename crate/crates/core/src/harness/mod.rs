//! Model ingestion, synthetic models, plan evaluation and reports.

mod dump;
mod eval;
mod report;
mod synth;

pub use dump::{
    load_dump, load_manifest, write_dump, write_synthetic, LayerEntry, Manifest, ModelDump,
    TensorEntry, MANIFEST_FILE, MANIFEST_VERSION,
};
pub use eval::{
    calibration_seed, evaluate, evaluate_plan, AgreementMatrix, CacheSlot, CalibratedTransform,
    CalibrationTiming, EvalOptions, EvalReport, LayerResult, ModelInfo, NamedPlan, PlanReport,
    RunConfig, Timings, TransformCache, REPORT_VERSION,
};
pub use report::{analyze, render_csv, render_text, GroupStats, LayerStats, ModelStats};
pub use synth::{
    generate_synthetic, layer_name, ActivationSpikes, LayerSpec, SyntheticModel, SyntheticSpec,
    TailProfile, DEFAULT_TOKENS,
};
