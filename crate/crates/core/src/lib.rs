pub mod audio;
pub mod coattention;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod nn;
pub mod pretrain;

pub use error::{Error, ErrorKind, Result};
