//! Neural perceptual threat model toolkit.
//!
//! A self-contained implementation of the LPIPS perceptual distance over a
//! differentiable convolutional feature extractor, the perceptual attacks
//! PPGD, LPA, and Fast-LPA with Newton and bisection projections, L2/Linf
//! PGD baselines, perceptual adversarial training, and a desk-scale
//! evaluation harness (union accuracy, unseen-mean accuracy, distance
//! distributions).
//!
//! Everything runs on a small f64 tensor core with reverse-mode automatic
//! differentiation; no external ML framework is involved.

pub mod attack;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod lpips;
pub mod nn;
pub mod numerics;
pub mod passes;
pub mod report;
pub mod tensor;
pub mod train;

#[cfg(any(test, feature = "testkit"))]
pub mod testkit;

pub use error::{Error, Result};
pub use passes::PassCounter;
pub use tensor::Tensor;
