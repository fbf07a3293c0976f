//! Value memory graph: a graph-structured world model for offline
//! reinforcement learning.
//!
//! The pipeline learns a metric space from logged transitions, merges nearby
//! state features into graph vertices, turns the graph into a deterministic
//! MDP, plans on it with value iteration and Dijkstra, and converts graph
//! actions back to environment actions with a goal-conditioned regressor.

pub mod dataset;
pub mod envs;
pub mod config;
pub mod error;
pub mod executor;
pub mod graph;
pub mod hash;
pub mod metric;
pub mod nn;
pub mod pipeline;
pub mod planner;
pub mod translator;

pub use error::{Result, VmgError};
