pub mod data;
pub mod error;
pub mod figure;
pub mod inference;
pub mod model;
pub mod pipeline;
pub mod poststrat;
pub mod replication;
pub mod states;

pub use error::{Error, Result};
