//! Deterministic discrete-event simulator for routing in payment channel networks.
//!
//! The crate models a payment channel network (nodes, bidirectional channels with
//! directional balances and fee policies), drives it with a single-threaded event loop,
//! and runs four routing protocols behind one interface:
//!
//! - `basic`: a global-knowledge oracle that always finds the minimum-hop feasible path;
//! - `etora`: height-based DAG routing with link reversal and balance-aware next-hop choice;
//! - `terp`: on-demand request/reply discovery with per-neighbor trust;
//! - `mdart`: proactive prefix routing over dynamic tree addresses with a DHT for lookups.
//!
//! Experiments are organised as cells (scenario × size × protocol × seed). Independent cells
//! can be executed in parallel (feature `parallel`, on by default); the results table is
//! identical regardless of the degree of parallelism.

pub mod catalog;
pub mod cli;
pub mod engine;
pub mod metrics;
pub mod pcn;
pub mod protocols;
pub mod runner;
pub mod scenarios;
mod time;

pub use time::SimTime;
