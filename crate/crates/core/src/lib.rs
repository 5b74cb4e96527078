//! Adversarial robustness toolkit for desk-scale classifiers: gradient-sign
//! attack generators, mixed-minibatch adversarial training, and the
//! accompanying evaluation protocols (accuracy tables, label-leak counts,
//! transfer matrices, capacity sweeps), with every gradient computed by the
//! in-crate reverse-mode engine in [`autodiff`].

pub mod advtrain;
pub mod attacks;
pub mod autodiff;
pub mod data_io;
pub mod error;
pub mod evaluate;
pub mod model;
pub mod rng;

pub use autodiff::Tensor;
pub use error::{Error, Result};
