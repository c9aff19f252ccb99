//! Teach-and-repeat evaluation: build a map from a taught sequence,
//! localize repeat frames against its vertices and report inlier statistics.

mod localize;
mod map_io;
mod report;
mod sequence;
mod teach;

/// Keypoint window for harness frames. Finer than the training window so a
/// 64x48 frame carries enough keypoints for the inlier rule.
pub const HARNESS_WINDOW: usize = 4;

pub use localize::{
    frame_disparity, lift, lifted_keypoints, localize, DisparitySource, LocalizationResult, LocalizeParams, MapVertex,
    MatchMode, DEFAULT_FAILURE_THRESHOLD,
};
pub use map_io::{load_map, save_map};
pub use report::{
    emit_report, read_report, read_run_csv, run_file, write_run_csv, ConditionMatrix, TaggedRun, MATRIX_FILE, RUN_COLUMNS,
    SUMMARY_FILE,
};
pub use sequence::{read_sequence, render_sequence, repeat_path, teach_path, write_sequence, PathConfig, Sequence};
pub use teach::{planar_error, repeat, teach, FrameRecord, RunReport, VtrMap, MIN_TEACH_KEYPOINTS};
