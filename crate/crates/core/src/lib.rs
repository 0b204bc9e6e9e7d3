//! Entropy + reconstruction mutual-information bounds, multi-view
//! self-supervised losses and a synthetic identifiability testbench.

pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod densities;
pub mod estimators;
pub mod methods;
pub mod evaluation;
pub mod seeding;
pub mod synthetic;
pub mod training;
pub mod config;
pub mod verify;
