//! Minimal differentiable tensor machinery: graph, parameters, layers and optimizers.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;

pub use graph::{softmax, Conv2dSpec, Grads, Graph, Var};
pub use layers::{Conv2d, Linear};
pub use optim::{Adam, Optimizer, Sgd};
pub use params::ParamStore;
