//! Session engine for step-by-step task guidance: task graphs, a topic bus
//! with persistence and replay, perception models over injected features, a
//! 3D object memory, step reasoning and post-hoc analytics.

pub mod memory3d;
pub mod perception;
pub mod reasoning;
pub mod stream_bus;
pub mod task_model;
pub mod analytics;
pub mod session;
