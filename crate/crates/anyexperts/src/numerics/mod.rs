//! Numerical substrate: dense matrices, a reverse-mode tape, deterministic
//! RNG, and a finite-difference gradient oracle.

mod gradcheck;
mod matrix;
mod params;
mod rng;
mod tape;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use matrix::{layer_norm_row, sigmoid, Matrix};
pub use params::ParamSet;
pub use rng::Rng;
pub use tape::{Tape, TapeParams, Var};
