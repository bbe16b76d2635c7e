//! Downstream evaluation and bound diagnostics.

mod bounds;
mod domain;
mod probe;
mod scaling;
mod sigma;

pub use bounds::*;
pub use domain::*;
pub use probe::*;
pub use scaling::*;
pub use sigma::*;
