pub mod costs;
pub mod diff;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod irl;
pub mod planner;
pub mod sim;

pub use error::{Error, Result};
