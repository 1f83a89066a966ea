#![no_std]

extern crate alloc;

mod linalg;

pub mod autograd;
pub mod cloud;
pub mod error;
pub mod guidance;
pub mod model;
pub mod optim;
pub mod params;
pub mod probe;
pub mod projection;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vision;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
