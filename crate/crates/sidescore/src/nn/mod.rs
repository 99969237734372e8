//! Reverse-mode autodiff and optimization primitives.
//!
//! The model is small enough that a self-contained tape keeps the whole
//! training path deterministic: values and gradients are computed
//! sequentially in a fixed order, so a fixed seed reproduces runs bitwise.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod tape;

pub use adam::Adam;
pub use layers::{ConvLayer, Graph, Linear, ParamId, ParamStore};
pub use tape::{ConvConf, Tape, Var};
