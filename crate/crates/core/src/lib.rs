pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod numcore;
pub mod seed;
pub mod train;

pub use error::{AbortSnapshot, Error, Result};
