pub mod channels;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod nets;
pub mod objectives;
pub mod oracles;
pub mod training;

pub use error::{Error, Result};
