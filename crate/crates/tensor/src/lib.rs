//! Dense tensors with a reverse-mode autodiff tape.
//!
//! The op set is what a small pre-norm decoder-only transformer needs:
//! matmul, bias/elementwise arithmetic, GELU, layer norm, softmax, token
//! embedding, fused causal attention, cross-entropy, plus row patching for
//! activation interventions. Every op checks its output for NaN/Inf and
//! returns [`TensorError::NonFinite`] instead of propagating it.

mod error;
mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_many};
pub use scalar::Scalar;
pub use tape::{Gradients, ParamId, RowPatch, Tape, Var};
pub use tensor::{argmax, Tensor};

/// `[m, k] x [k, n]` product of plain row-major buffers, outside any tape.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    scalar::matmul_into(scalar::MatRef::new(a, m, k), scalar::MatRef::new(b, k, n), &mut out, false);
    out
}
