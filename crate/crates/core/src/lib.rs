//! Multi-task fusion of fine-tuned models, with linearized (tangent-space)
//! low-rank adapters.
//!
//! The numeric core is generic over [`Scalar`]: the same model code runs on
//! plain floats, on forward-mode [`Dual`] numbers (Jacobian-vector products)
//! and on reverse-mode [`Var`]s (gradients). Everything above the core works
//! in `f64`.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod dual;
pub mod error;
pub mod finetune;
pub mod fusion;
pub mod io;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod scalar;
pub mod seeds;
pub mod tape;
pub mod task_vector;
pub mod tasks;
pub mod tensor;

pub use dual::Dual;
pub use error::{Error, Result};
pub use model::{Mode, Model, ModelSpec};
pub use params::{Layout, ParamTree};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Dual64 = Dual<f64>;
