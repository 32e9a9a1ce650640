//! Receptive-field aggregator convnet: differentiable kernels, a reverse-mode
//! tape, the aggregator and full-model builders, and the analysis tools
//! (parameter/MAC accounting, receptive-field support, effective receptive
//! fields and their Gaussian-ness).

pub mod analysis;
pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod params;
pub mod real;
pub mod rfa;
pub mod rng;
pub mod tensor;

pub use autograd::{Gradients, NodeId, OpCounts, Tape};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Network};
pub use params::{Category, Graph, ParamStore, WeightInit};
pub use real::Real;
pub use rfa::{DisTopology, Rfa, RfaConfig};
pub use rng::Rng;
pub use tensor::{Shape, Tensor};
