//! HTTP inference endpoint for a trained waypoint policy (`/predict`,
//! `/health`) and an HTTP client for the clip filter.

mod filter_client;
pub mod protocol;
mod server;

pub use filter_client::{FilterResponse, HttpFilterClient};
pub use protocol::{FieldError, Frames, Health, PredictRequest, PredictResponse, PROTOCOL_VERSION};
pub use server::{
    bind_addr, router, run_blocking, spawn_background, Loaded, ServeError, Server, ServerState, BIND_ENV,
};
