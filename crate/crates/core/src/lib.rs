pub mod baselines;
pub mod checkpoint;
pub mod env;
pub mod error;
pub mod instance;
pub mod io;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod train;
pub mod rng;

pub use error::{Error, Result};
