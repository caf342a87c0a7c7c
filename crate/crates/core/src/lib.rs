//! Trace-driven simulation of composed dynamic memory managers.

pub mod allocators;
pub mod freelist;
pub mod manager;
pub mod metrics;
pub mod presets;
pub mod search;
pub mod simulator;
pub mod trace;
