//! Desk-scale simulator of meta-learned initialization followed by
//! decentralized federated adaptation, with exact energy accounting.

pub mod consensus;
pub mod energy;
pub mod env;
pub mod error;
pub mod maml;
pub mod qlearn;
pub mod runner;
pub mod scalar;
pub mod seed;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision instantiations used by the simulator and CLI.
pub type ParamVector = qlearn::ParamVector<f64>;
pub type ExperienceBatch = env::ExperienceBatch<f64>;
pub type TaskSet = env::TaskSet<f64>;
pub type EnergyProfile = energy::EnergyProfile<f64>;
pub type EnergyReport = energy::EnergyReport<f64>;
