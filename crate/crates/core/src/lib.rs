//! Lightweight vision-language regression for UI screen ratings.
//!
//! The pipeline encodes a screenshot with a depthwise-separable CNN and its
//! caption with a small transformer, fuses the two vectors as
//! `[v, t, v*t, |v-t|]`, and regresses a scalar rating with an MLP head.
//! Everything runs on the in-crate reverse-mode tape in [`tensor`].

pub mod data;
pub mod error;
pub mod fusion;
pub mod image;
pub mod metrics;
pub mod params;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ActivationKind, Graph, Tensor, Var};
