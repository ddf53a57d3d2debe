//! A small dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! The engine is deliberately narrow: it offers exactly the operations a
//! ConvNet4-style embedder with attention gating and a softmax classifier
//! needs, each with a hand-written backward pass, plus AdamW and a
//! finite-difference gradient checker. Everything is generic over [`Real`] so
//! the same code runs in `f32` for training and `f64` for verification.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod nn;
pub mod optim;
pub mod param;
pub mod real;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_params, grad_check_with, GradCheckOptions, GradCheckReport, Objective};
pub use graph::{BatchStats, Graph, Var};
pub use nn::{BatchNorm2d, Conv2d, Linear, Mode, RunningStats};
pub use optim::{AdamW, AdamWConfig};
pub use param::{Param, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
