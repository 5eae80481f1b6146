//! Measurement-driven quantum state engineering of a central-spin system.
//!
//! The crate simulates a central spin coupled to a nuclear spin bath exactly,
//! exposes the measurement-control problem as an episodic environment, and
//! trains deep Q-learning agents to find measurement sequences that leave the
//! bath in a chosen Bell state.

pub mod agent;
pub mod env;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod sequence;
