//! Gradient-inversion attacks on shared model gradients.
//!
//! A [`victim`] computes the averaged batch gradient of a [`model`] on private
//! data. The [`attack`] engine optimises dummy inputs and soft labels so that
//! their gradients match the observed ones under a [`distance`], then
//! [`metrics`] score the reconstruction. [`text`] does the same in embedding
//! space and maps embeddings back to tokens.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod data;
pub mod distance;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod pnm;
pub mod tensor;
pub mod text;
pub mod victim;
