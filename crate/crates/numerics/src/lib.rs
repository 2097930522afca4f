//! Small dense-tensor toolkit: tensors, a reverse-mode tape, linear
//! attention, transformer layers, Adam and finite-difference checks.

pub mod adam;
pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use attention::AttnLayout;
pub use error::{NumericsError, Result};
pub use gradcheck::{grad_check, Probe};
pub use params::{Grads, ParamId, ParamStore};
pub use tape::{Precision, Tape, Var};
pub use tensor::{matmul, Tensor};
