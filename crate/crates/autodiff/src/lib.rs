//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Values are plain row-major [`Tensor`]s. A [`Tape`] records each
//! operation applied to [`Var`] handles and replays them backwards to
//! produce first-order gradients. Operations beyond the built-in set can be
//! added from other crates by implementing [`Backward`] and calling
//! [`Tape::record`].
//!
//! ```
//! use autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::new([2], vec![1.0, -3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, -6.0]);
//! ```

mod error;
mod float;
pub mod flops;
pub mod gradcheck;
pub mod ops;
pub mod optim;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use float::{gemm, Float, MatRef};
pub use ops::{sigmoid, ConvGeometry, Padding};
pub use optim::{sgd_momentum_step, SgdMomentum};
pub use tape::{Backward, Tape, Var};
pub use tensor::{strides, Tensor};
