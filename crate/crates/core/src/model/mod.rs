//! The guided two-branch classification network.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod guidance;
pub mod heads;
pub mod net;
pub mod variance;

pub use backbone::{guided_forward, BackboneConfig, BackboneOutput, Depth, GuidedBackbone, Stage, StageFeature, Stream, FUSION_STAGES};
pub use checkpoint::Checkpoint;
pub use config::{joint_training_wiring, FusionWeights, GuidanceConfig, ModelConfig, SharingPlan, TaskMode};
pub use guidance::{apply_guidance, make_guidance_inputs, split_value, GuidanceMode};
pub use heads::{fuse_scores, pool_and_classify, ClassifierHead, Provenance, ScoreVector};
pub use net::{NetInput, PassInput, Prediction, SgNet, StreamOutputs, TaskNet};
pub use variance::{variance_head, variance_map, variance_map_graph, VarianceHead, VarianceMap};
