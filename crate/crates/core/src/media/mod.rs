//! Shot decoding, clip sampling, preprocessing and optical flow.

pub mod flow;
pub mod frame;
pub mod preprocess;
pub mod sampling;
pub mod stack;
pub mod video;

pub use flow::{compute_flow, BlockMatchFlow, FlowBackend, FlowEstimator};
pub use frame::{FlowField, FrameImage, Planes};
pub use preprocess::{Preprocess, Transform};
pub use sampling::{consecutive_frames, segment_clips, SamplingMode};
pub use stack::{ClipStack, MediaStore, SamplingConfig};
pub use video::{open_media, write_srv, FrameSource};
