pub mod attention;
pub mod backbone;
pub mod data;
pub mod error;
pub mod graphs;
pub mod losses;
pub mod ndtensor;
pub mod nn;
pub mod patterns;
pub mod trainkit;

pub use error::{Error, Result};
