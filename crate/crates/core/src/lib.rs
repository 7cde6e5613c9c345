//! Parameterized physics-informed networks with parameter-efficient adapters.

pub mod adapters;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod linalg;
pub mod model;
pub mod pde;
pub mod refsolve;
pub mod selftest;
pub mod train;

pub use error::{Error, Result};
