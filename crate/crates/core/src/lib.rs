//! Decentralized SGD with gossip averaging, and the influence of one node's
//! update on the network: counterfactual ground truth and its gradient
//! estimates along propagation paths.

pub mod analysis;
pub mod data;
pub mod engine;
pub mod error;
pub mod influence;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod topology;

pub use error::{Error, Result};
