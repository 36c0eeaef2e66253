//! Minimal dense neural-network toolkit: tape autodiff, layers, Adam.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;

pub use graph::{Activation, Graph, Grads, Segment, Var, GATHER_ZERO};
pub use optim::Adam;
pub use params::{Mat, ParamId, ParamStore};
