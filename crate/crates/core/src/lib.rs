//! Score-guided GAN training on a self-contained dense-tensor autodiff engine.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod run;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use kernels::Padding;
pub use rng::{Rng, RngState};
pub use tape::{Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
