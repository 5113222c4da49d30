//! Desk-scale age estimation engine: residual/RoR backbones, an LSTM
//! attention head that locates age-sensitive regions on the final feature
//! map, global+local prediction fusion, expectation-based age regression,
//! and the evaluation protocols that go with them. Everything runs on a
//! small self-contained reverse-mode autodiff tape.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod estimation;
pub mod attention;
pub mod backbone;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
