// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod graphs;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod verify;
pub mod watermark;

pub use error::{Error, Result};
