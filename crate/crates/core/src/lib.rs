pub mod continual;
pub mod error;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod prefix_moe;
pub mod routing;
pub mod theory;

pub use error::{Error, Result};
