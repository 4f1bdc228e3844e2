pub mod binio;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod report;

pub use error::{Error, Result};
