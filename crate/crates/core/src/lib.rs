pub mod analysis;
pub mod autodiff;
pub mod backbone;
pub mod cell;
pub mod cli;
pub mod error;
pub mod genotype;
pub mod io;
pub mod pruner;
pub mod rng;
pub mod search;
pub mod trajectory;

pub use error::{Error, Result};
