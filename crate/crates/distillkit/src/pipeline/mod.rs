//! Stage orchestration: configs, the shared training loop, artifact
//! manifests, and the stage implementations behind the CLI.

pub mod config;
pub mod data;
pub mod manifest;
pub mod stages;
pub mod train;

pub use config::{
    deterministic_mode, load_stage_config, LoadedConfig, Stage, StageConfig, DESK_SCALE,
    DETERMINISTIC_ENV,
};
pub use manifest::{read_manifest, sha256_file, sha256_hex, Manifest};
pub use stages::{run_stage, StageOutcome};
pub use train::{dev_bleu, token_batches, train_loop, DevSet, EvalPoint, TrainOutcome};
