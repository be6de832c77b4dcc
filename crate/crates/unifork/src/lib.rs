//! Desk-scale unified understanding/generation transformer with a Y-shaped
//! backbone, a three-stage freeze-scheduled training pipeline, layer-wise
//! mutual-kNN alignment probing, and classifier-free-guidance sampling —
//! all exercised on a procedural, exactly invertible multimodal toy world.

pub mod ablate;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod probe;
pub mod rng;
pub mod sample;
pub mod tensor;
pub mod toyworld;
pub mod train;
pub mod vocab;

pub use graph::{Grads, Graph, NodeId, ParamId, ParamStore};
pub use model::{Branch, ForkedTransformer, ForwardTrace, ModelConfig};
pub use tensor::Tensor;
