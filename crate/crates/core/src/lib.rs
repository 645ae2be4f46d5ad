pub mod data;
pub mod error;
pub mod evaluation;
pub mod io_util;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{init_params, param_count, ModelConfig, ModelParams};
pub use tensor::{OpKind, Scalar, Tape, Tensor, Var};
