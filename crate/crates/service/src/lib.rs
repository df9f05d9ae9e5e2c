//! Command line and HTTP front end for the retrieval engine.

pub mod cli;
pub mod config;
pub mod http;
pub mod render;
pub mod state;

pub use config::ServiceConfig;
pub use http::router;
pub use state::ServiceState;
