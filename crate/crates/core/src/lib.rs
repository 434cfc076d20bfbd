pub mod cli;
pub mod envs;
pub mod metagrad;
pub mod error;
pub mod harness;
pub mod net;
pub mod replay;
pub mod rollout;
pub mod td3;
pub mod tuners;

pub use error::{Error, Result};
