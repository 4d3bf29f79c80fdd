pub mod cli;
pub mod clipops;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod nn;
pub mod objectives;
pub mod synthvid;
pub mod trainloop;

pub use error::{Error, Result};
