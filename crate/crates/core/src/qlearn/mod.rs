//! Q-network, Bellman loss and plain SGD.

mod dql;
mod net;
mod params;

pub use dql::{dql_grad, dql_loss, sgd_step, sync_target, DqlObjective, TargetNetwork};
pub use net::{q_forward, QNetConfig};
pub use params::{LayerShape, Layout, ParamVector, Sidecar, DEFAULT_MODEL_BYTES};
