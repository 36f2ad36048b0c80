//! Minimal convolutional network toolkit: tensors, named parameters,
//! layers with hand-written backward passes, and the optimiser.

pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use layers::{Conv2d, Linear};
pub use optim::RmsProp;
pub use params::{ParamEntry, ParamId, ParamSet};
pub use tensor::{Real, Tensor};
