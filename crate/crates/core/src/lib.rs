pub mod atv;
pub mod autodiff;
pub mod baselines;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod optim;
pub mod params;
pub mod tasks;
pub mod tensor;
pub mod theory;
pub mod transformer;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::Tensor;
