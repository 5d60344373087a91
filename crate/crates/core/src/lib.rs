//! Packet-level simulator and protocol library for controller-guided
//! transaction broadcast.
//!
//! A logically centralized controller embeds every node in a 3-D virtual
//! coordinate space from link-delay telemetry, clusters the embedding, and
//! pushes signed relay tables to the nodes. Nodes relay transaction digests
//! along those tables, perform an early outburst for their own transactions,
//! and kick off a cluster whenever a tagged transaction crosses into it.
//!
//! The crate also contains the four comparison schemes (random relay,
//! lowest-RTT relay, UCB peer scoring, decentralized Vivaldi with clustering),
//! a Byzantine adversary model, and the experiment harness used by the CLI.

pub mod adversary;
pub mod auth;
pub mod baselines;
pub mod cluster;
pub mod config;
pub mod controller;
pub mod dissemination;
pub mod error;
pub mod geom;
pub mod harness;
pub mod overlay;
pub mod par;
pub mod reach;
pub mod rng;
pub mod sim;
pub mod stats;

pub use config::ScenarioConfig;
pub use error::{Error, Result};
pub use overlay::{LatencyField, NodeId, Overlay};
pub use sim::{run_scenario, RunMetrics, SchemeId};
