pub mod cli;
pub mod config;
pub mod container;
pub mod error;
pub mod fusion;
pub mod gridmap;
pub mod losses;
pub mod mesh;
pub mod netcore;
pub mod parammap;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
