pub mod autodiff;
pub mod error;
pub mod lrsa;
pub mod nn;
pub mod pde;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
