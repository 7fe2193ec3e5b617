pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod models;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorCategory, Result};
pub use graph::{Evaluation, GradientMap, Graph, Mode, NodeId};
pub use models::{build_model, BatchViews, ModelInstance, ModelKind, ModelSpec};
pub use tensor::{Element, Tensor};
