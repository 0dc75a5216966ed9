pub mod cli;
pub mod condlm;
pub mod corpus;
pub mod ctxencoder;
pub mod error;
pub mod gens;
pub mod metrics;
pub mod nn;
pub mod numkernel;
pub mod reranker;
pub mod sclstm;
pub mod seeds;

pub use error::{Error, Result};
