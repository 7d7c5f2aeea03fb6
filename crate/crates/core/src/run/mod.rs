//! Training, evaluation and the command implementations built on them.

pub mod commands;
pub mod evaluate;
pub mod manifest;
pub mod schedule;
pub mod train;

pub use evaluate::{clip_stems, detect_center, detect_clip, evaluate, occluded_recall, CenterResult, EvalOutcome};
pub use manifest::{parse_manifest, read_manifest, EpochRecord, Manifest, ManifestWriter, MANIFEST_FILE, TIMING_FILE};
pub use schedule::LrSchedule;
pub use train::{
    checkpoint_name, epoch_plan, initial_detector, overfit_snippet, prepare_snippet, snippet_loss, train, StepLoss,
    TrainOutcome, FINAL_CHECKPOINT,
};
