//! Keypoint and pose losses, the end-to-end per-sample objective, Adam and
//! the early-stopping training loop.

mod adam;
mod losses;
mod objective;
mod trainer;

pub use adam::{adam_step, AdamState};
pub use losses::{keypoint_loss, pose_loss, LossConfig};
pub use objective::{
    keypoints_on_tape, sample_loss, soft_match_on_tape, total_loss, BatchOutcome, SampleOutcome, MIN_GATED_MATCHES,
};
pub use trainer::{read_curve, train, write_curve, EpochRecord, TrainConfig, TrainReport, CHECKPOINT_DIR, CURVE_FILE};
