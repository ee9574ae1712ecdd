//! Simulation and verification of uniform dispersal by a crash-prone robot
//! swarm on graph environments.

pub mod adversary;
pub mod cli;
pub mod coupling;
pub mod dispersal;
pub mod engine;
pub mod env;
pub mod tasep;

pub use adversary::{budget, Adversary, AdversaryPolicy, PolicyKind};
pub use dispersal::{decide, Action, RunResult, SlowRule, TieBreak, World, WorldOptions};
pub use engine::{generate_run, meaningful_times, replay, DeletionRule, EventOrder, EventRecord, Mode, RunConfig};
pub use env::{EnvironmentGraph, VertexId};
