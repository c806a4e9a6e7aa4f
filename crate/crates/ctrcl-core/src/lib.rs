//! Desk-scale collaborative training of two heterogeneous segmentation
//! students — a convolutional encoder-decoder and a self-attention
//! encoder-decoder — with ground-truth-rectified logit transfer and
//! class-aware feature transfer between them.
//!
//! The crate is self-contained: a small f64 reverse-mode autodiff engine
//! ([`tensor`]), the two toy students ([`students`]), the rectification and
//! category-perception modules with their KL transfer losses ([`rlcl`],
//! [`cfcl`]), the segmentation objective, AdamW and the polynomial schedule
//! ([`objective`]), a synthetic shape dataset with a portable binary format
//! ([`data`]), evaluation metrics ([`metrics`]), and the training harness
//! with checkpointing and experiment logs ([`harness`]).
//!
//! Scalar reference implementations used to cross-check the vectorized
//! paths live in [`oracle`].

pub mod cfcl;
pub mod data;
pub mod error;
pub mod harness;
pub mod labels;
pub mod metrics;
pub mod objective;
pub mod oracle;
pub mod rlcl;
pub mod students;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{finite_diff_check, no_grad, Tensor, PROB_EPS};
