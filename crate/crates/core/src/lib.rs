pub mod corpus;
pub mod crf;
pub mod error;
pub mod hmm;
pub mod pipeline;
pub mod representations;
pub mod train;
mod textio;

pub use error::{Error, Result};
