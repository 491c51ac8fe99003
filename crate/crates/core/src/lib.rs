//! Discounted multi-agent dynamic games: forward equilibrium solving and inverse
//! inference of cost parameters and discount factors from observed trajectories.

pub mod error;
pub mod game;
pub mod harness;
pub mod inverse;
pub mod linalg;
pub mod micp;
pub mod observation;
pub mod rng;
pub mod scenarios;
pub mod sensitivity;
pub mod solver;
pub mod transcription;

pub use error::{Error, Result};
