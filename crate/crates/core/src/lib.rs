pub mod attack;
pub mod bounds;
pub mod cli;
pub mod data;
pub mod detect;
pub mod error;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod plane;
pub mod ppm;
pub mod profile;
pub mod quantile;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use graph::{Graph, GraphBuilder, NodeId, Op};
pub use tensor::Tensor;
