//! Many-to-many translation with target-language tags.

mod error;

pub mod corpus;
pub mod decode;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod tokenizer;

pub use error::{Error, Result};
