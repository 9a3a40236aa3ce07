pub mod barycenter;
pub mod error;
pub mod extractor;
pub mod heads;
pub mod matstats;
pub mod simlab;
mod serial;

pub use error::{Error, Result};
