//! Run the HTTP service with zero-work backends.
//!
//! cargo run --example serve
//! curl -F image=@some.png -F prompt="bright lesion" localhost:8750/api/segment

use std::net::SocketAddr;
use std::sync::Arc;

use usground::detector::NullDetector;
use usground::mask::BoxMaskBackend;
use usground::pipeline::Pipeline;
use usground::service::{port_from_env, serve, ServiceState};

#[tokio::main]
async fn main() -> usground::Result<()> {
    tracing_subscriber::fmt().init();
    let state = ServiceState::with(Pipeline::new(Arc::new(NullDetector), Arc::new(BoxMaskBackend)), None);
    serve(state, SocketAddr::from(([127, 0, 0, 1], port_from_env()?))).await
}
