//! HTTP service for LearnFlow sessions: flow registration, per-participant
//! event feeds (long-poll and SSE), learner input and instructor controls.

mod app;
mod error;
mod routes;
mod session;

pub use app::AppState;
pub use error::ApiError;
pub use routes::router;
pub use session::Session;

/// Serves the API until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
