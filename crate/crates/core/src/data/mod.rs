//! Label taxonomy, shot records and manifests.

pub mod labels;
pub mod manifest;

pub use labels::{MovementType, ScaleType, Split, Task};
pub use manifest::{Manifest, ShotRecord};
