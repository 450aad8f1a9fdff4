//! Minimal reverse-mode automatic differentiation over dense row-major
//! tensors, sized for CPU training of small segmentation networks.
//!
//! Operations are methods on [`Var`]; every call records a node on the
//! owning [`Tape`]. [`Tape::backward`] walks the tape in reverse and returns
//! gradients for the leaves. All kernels are single-threaded and
//! deterministic: identical inputs give bit-identical outputs and gradients.

pub mod gradcheck;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use ops::image::{sobel_plane, SOBEL_X, SOBEL_Y};
pub use scalar::{gemm, MatLayout, Scalar};
pub use tape::{GradSink, Gradients, Tape, Var};
pub use tensor::{numel, split_axis, strides, Tensor};
