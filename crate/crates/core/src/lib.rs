pub mod checkpoint;
pub mod cmc;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod experiment;
pub mod lgh;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tokenizer;
pub mod training;
pub mod transfer;

pub use error::{HistGenError, Result};
