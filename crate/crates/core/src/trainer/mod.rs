//! Optimisation of the joint objective, pretraining phases and ablations.

pub mod config;
pub mod optim;
pub mod pretrain;
pub mod run;
pub mod system;

pub use config::{GateProxy, GerPretrainConfig, MwerScorer, Schedule, Toggles, TrainConfig};
pub use optim::{Adam, StepInfo};
pub use pretrain::{
    pretrain_asr, pretrain_ger, random_letter_string, synthetic_nbest, PretrainConfig,
};
pub use run::{
    ablation_matrix, ablation_matrix_timed, ablation_table, evaluate, finetune_counts,
    pretrained_system, system_from_checkpoint, total_loss, train, train_with, AblationRow,
    AblationStudy, CheckpointMeta, EpochLog, LossBreakdown, ParamCounts, PretrainSummary,
    RunOptions, SplitWer, TrainOutcome, TrainReport, ABLATION_ROWS,
};
pub use system::{AcousticSource, GateTarget, LossVars, Prepared, System};
