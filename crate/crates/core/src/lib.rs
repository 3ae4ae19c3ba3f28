pub mod data;
pub mod error;
pub mod fixtures;
pub mod media;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod subject;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Element type used for training and inference.
pub type Real = f32;
pub type Tensor32 = Tensor<Real>;
pub type Params = nn::ParamStore<Real>;
pub type ModelCheckpoint = model::Checkpoint<Real>;
pub type Outcome = train::TrainOutcome<Real>;
