//! Map-free multi-agent trajectory forecasting.
//!
//! Scenes of observed agent tracks are normalized into per-agent local
//! frames, encoded per agent along the temporal axis (LSTM + attention)
//! and the spatial axis (position-wise MLP + attention), fused through a
//! gated graph-attention spatial interaction and a masked temporal
//! transformer, and decoded into a Laplace mixture over `K` future
//! trajectories per agent.

pub mod error;
pub mod eval;
pub mod model;
pub mod numcore;
pub mod scene;
pub mod training;

pub use error::{Error, Result};
