//! Experiment orchestration and the synthetic-language testbed.

mod compare;
mod synthetic;
mod train;

pub use compare::{
    compare_settings, evaluate_direction, ComparisonTable, DirectionEval, SettingRun,
};
pub use synthetic::{
    default_specs, gen_synthetic, off_target_rate, GroundTruth, ReorderRule, SynthConfig,
    SyntheticLangSpec,
};
pub use train::{
    dev_loss, run_experiment, DirectionScore, ExperimentConfig, LogRecord, RunLog, RunOptions,
    RunOutput, PRESETS,
};
