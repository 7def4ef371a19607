//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! All arithmetic is fp64 and single-threaded. A [`Tape`] records one
//! forward pass; [`Tape::backward`] returns [`Gradients`] for every node
//! that depends on a trainable leaf.
//!
//! ```
//! use mscl_autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.var(Tensor::vector(vec![1.0, 2.0]));
//! let loss = x.mul(&x).unwrap().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod error;
pub mod finite_diff;
pub mod kernels;
mod optim;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use optim::{AdamW, Parameter};
pub use tape::{
    concat_cols, concat_rows, cosine, max_pool, one_hot_targets, Gradients, Tape, Var, NORM_CLAMP, PROB_CLAMP,
};
pub use tensor::Tensor;
