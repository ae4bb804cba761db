//! Recording persistence, window sequencing, dataset manifests and
//! cross-validation split plans.

pub mod manifest;
pub mod recording;
pub mod splits;
pub mod windows;

pub use manifest::{DatasetIndex, IndexEntry};
pub use recording::{load_recording, recording_id, store_recording, Recording};
pub use splits::{make_splits, Fold, SessionKey, SplitMethod, SplitPlan};
pub use windows::{load_windows, sequence_windows, store_windows, GestureWindow};
