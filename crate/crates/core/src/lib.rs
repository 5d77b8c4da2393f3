pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod imaging;
pub mod masking;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
