pub mod boxes;
pub mod checkpoint;
pub mod datapipe;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod head;
pub mod imaging;
pub mod model;
pub mod nn;
pub mod query;
pub mod setloss;
pub mod train;

pub use error::{Error, Result};
