//! Training schedule, the training loop and evaluation.

pub mod batch;
pub mod config;
pub mod eval;
pub mod trainer;

pub use batch::{net_input, sample_shot, shot_seed, ShotSample, TeacherMaps};
pub use config::{lr_at, GeneratorMode, TeacherConfig, TrainConfig};
pub use eval::{
    evaluate, evaluate_model, evaluate_predictor, predict_shot, ConfusionMatrix, EvalReport, LabelOracle, ModelPredictor,
    RuntimeStats, ShotPredictor, UniformRandom,
};
pub use trainer::{kd_train, read_log, train, EpochLog, KdTrainConfig, TrainOptions, TrainOutcome};
