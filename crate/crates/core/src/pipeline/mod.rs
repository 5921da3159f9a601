//! ERM training, clustering and task-set construction, mask training,
//! extraction and fine-tuning, plus the ablation, variant, sweep, and
//! two-moons experiment harnesses.

mod config;
mod experiments;
mod run;
mod train;

pub use config::{
    derive_seed, ClusteringConfig, DataConfig, MaskOptimizer, MaskTrainConfig, PipelineConfig, PruneMode, SgdConfig,
    TaskDataConfig, Variant,
};
pub use experiments::{
    ablation_rows, demo_two_moons, for_seeds, mean, run_ablation_suite, run_variant_suite, seed_range, std_dev,
    sweep_pruning_ratio, sweep_rows, variant_rows, Demo, DemoModel, MetricsRow, DEMO_ERM, DEMO_PRUNED, DEMO_RANDOM,
};
pub use run::{
    fingerprint, make_splits, network_fingerprint, prepare,
    restore_interventions, prepare_from, prepare_with_erm, run_ablation,
    run_pipeline, run_prepared, write_json, Prepared, PurityReport, RunArtifacts, SettingOutcome, Splits,
};
pub use train::{
    extract, extract_and_finetune, finetune, train_erm, train_mask, train_network, write_curve, ContrastiveTerm,
    EpochRecord, Extracted, TrainSpec, Trainable,
};
