//! Kernel-sharing atrous convolution, from first principles.
//!
//! A small CPU library built around one structural idea: a pyramid of dilated
//! convolutions whose branches all apply the *same* 3×3 kernel at different
//! atrous rates, with per-rate batch normalization and a summed ReLU output.
//! Sharing keeps the 3×3 parameter count at `9·C_in·C_out` no matter how many
//! rates are stacked, while the classic ASPP baseline grows linearly in the
//! branch count.
//!
//! The crate provides:
//! - [`tensor`]: dense `(N,C,H,W)` tensors on a reverse-mode autodiff tape;
//! - [`ops`]: dilated conv, batch norm, ReLU, pooling, bilinear upsampling
//!   and softmax cross-entropy;
//! - [`heads`]: the kernel-sharing head, the ASPP baseline, a toy backbone
//!   and full toy segmentation models;
//! - [`ledger`]: exact parameter accounting and analytic MAC counts;
//! - [`data`]: a deterministic synthetic shapes dataset plus augmentation;
//! - [`train`]: SGD training, mIOU evaluation and a finite-difference
//!   gradient checker;
//! - [`checkpoint`]: a bit-exact binary tensor container.
//!
//! The `ksac` binary exposes all of it as a CLI. The `book/` directory holds
//! a guided tour; its code snippets compile as doc-tests below.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod heads;
pub mod ledger;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Fill, Real, Tape, TensorId};

// The book chapters double as doc-tests so the guide can never drift from
// the library.
#[doc = include_str!("../../../book/src/tensors-and-autodiff.md")]
mod _book_tensors {}
#[doc = include_str!("../../../book/src/dilated-convolution.md")]
mod _book_dilated_conv {}
#[doc = include_str!("../../../book/src/kernel-sharing.md")]
mod _book_kernel_sharing {}
#[doc = include_str!("../../../book/src/parameter-accounting.md")]
mod _book_params {}
#[doc = include_str!("../../../book/src/training-and-evaluation.md")]
mod _book_training {}
