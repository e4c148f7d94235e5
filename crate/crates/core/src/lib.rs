//! A simulated two-tier key-value store: Raft groups inside each datacenter, FIFO
//! replication between datacenters, and per-key session guarantees enforced with stable
//! vectors and hybrid logical clocks. Every run is deterministic in its seed.

pub mod checker;
pub mod client_session;
pub mod cluster;
pub mod config;
pub mod harness;
pub mod hlc;
pub mod protocol;
pub mod replicated_log;
pub mod server;
pub mod simnet;
pub mod store;
pub mod trace;
pub mod types;
