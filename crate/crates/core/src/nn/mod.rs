//! Minimal tensor, autodiff and optimizer machinery for the toy networks.

mod adam;
mod graph;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{task_attention_probs, Graph, Var};
pub use params::{Binder, Grads, ParamStore};
pub use tensor::Tensor;
