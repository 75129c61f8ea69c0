//! Prompt-driven object mining: text-conditioned detection, association of
//! detections into trajectories, and template/search patch cropping.

pub mod associate;
pub mod crop;
pub mod detector;
pub mod hungarian;
pub mod pipeline;
pub mod trajectory;

pub use associate::{associate, match_frame, AssociationParams, Associator};
pub use crop::{crop_pair, resize_frame, CropWindow, PatchPair};
pub use detector::{prompt_phrases, Detection, Detector, HttpDetector, OracleDetector};
pub use pipeline::{detect_all, mine, mine_to_dir, track_dir_name, MiningOutput, MiningSummary};
pub use trajectory::{read_trajectories, write_trajectories, Trajectory, TrajectoryEntry};
