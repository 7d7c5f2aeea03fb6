pub mod bbox;
pub mod config;
pub mod blend;
pub mod detector;
pub mod error;
pub mod seed;
pub mod eval;
pub mod oracle;
pub mod run;
pub mod selftest;
pub mod tensor;
pub mod video;

pub use error::{Error, Result};
