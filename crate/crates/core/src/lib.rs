pub mod adaptation;
pub mod backbone;
pub mod context;
pub mod error;
pub mod objective;
pub mod optim;
pub mod prompts;
pub mod token_net;

pub use error::{Error, Result};
pub mod harness;
