//! Experiment recipes: configuration profiles and the subcommand pipeline.

mod config;
mod record;
mod run;

pub use config::{
    EvalConfig, ExperimentConfig, Overrides, Paths, Profile, ProfileRow, System, DESK_STAGE2_BATCH,
    PAPER_STAGE2_BATCH,
};
pub use record::{RunRecord, RunTimer, CODE_VERSION};
pub use run::{
    run_eval, run_export_features, run_finetune, run_gen_data, run_gen_triplets, run_grad_check,
    run_pretrain_inversion, run_retrieve, run_train_encoders, BackendKind, RetrieveOutcome, Stage0Report,
    StageReport, HELD_OUT_PAIRS,
};
