//! Attention-augmented depthwise-separable CNN toolkit.
//!
//! The crate covers the whole pipeline: leaf-image preprocessing
//! ([`preprocess`]), a small reverse-mode autodiff engine ([`autodiff`]),
//! the network itself ([`conv_layers`], [`attention`], [`model`]), k-fold
//! training and metrics ([`train`]), Gaussian-process Bayesian optimization
//! of the attention filter counts ([`bayes_opt`]), interpretability
//! ([`viz`]) and the command-line driver ([`cli`]).

pub mod attention;
pub mod autodiff;
pub mod bayes_opt;
pub mod cli;
pub mod conv_layers;
pub mod error;
pub mod model;
pub mod preprocess;
pub mod synthetic;
pub mod train;
pub mod viz;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
