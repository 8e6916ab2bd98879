pub mod builder;
pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod search;
pub mod select;
pub mod substitute;
pub mod text;
pub mod types;

pub use error::{Error, ErrorKind, Result};
