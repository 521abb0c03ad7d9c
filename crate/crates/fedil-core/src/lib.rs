//! Deterministic simulator of a label-at-server federated semi-supervised
//! learning protocol.
//!
//! A server holds the only labeled data and coordinates clients that hold
//! disjoint unlabeled shards. Each round the server refines a supervised
//! reference model, selected clients train locally on augmented views of
//! their shard (confidence-gated pseudo-label loss, a consistency KL pull
//! toward the server reference, and cross-entropy on each client's frozen
//! pseudo-label set), and the server averages only the client updates whose
//! direction is cosine-aligned with its own supervised update. A convergence
//! monitor tracks the norm of the aggregated update and checks the
//! contraction criterion that guarantees a fixed point.
//!
//! Modules map onto the pipeline:
//!
//! - [`model`] — MLP forward/backward with exact gradients, losses, SGD,
//!   checkpoints.
//! - [`data`] — dataset construction, label-rate split, IID / non-IID
//!   client partitioning, MNIST IDX loading, synthetic clusters.
//! - [`augment`] — weak/strong views with provenance back to the source
//!   example.
//! - [`client`] — local training, incremental credibility counters, frozen
//!   pseudo-label sets.
//! - [`server`] — supervised refinement, cosine gate, gated aggregation,
//!   client selection.
//! - [`monitor`] — update-norm trace, contraction verdict, fixed-point
//!   iteration demo.
//! - [`config`] / [`harness`] — experiment configuration and the round loop
//!   with FedAvg and server-only baseline modes.

pub mod augment;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod monitor;
pub mod par;
pub mod rng;
pub mod server;

pub use error::{Error, Result};
