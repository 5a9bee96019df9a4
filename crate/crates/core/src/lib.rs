//! Optimal-transport distances between neural architectures and a Gaussian
//! process search loop built on them.
//!
//! The crate is organised around a pipeline:
//!
//! * [`archgraph`]: architecture DAGs, their JSON schema, validation, layer
//!   masses, and path statistics.
//! * [`transport`]: an exact solver for balanced transportation problems.
//! * [`otmann`]: the architecture distance assembled from label mismatch,
//!   structural, and non-assignment penalties.
//! * [`gp`]: a Gaussian process over architectures with a distance-ensemble
//!   kernel, hyperparameter sampling, and expected improvement.
//! * [`evo`]: architecture modifiers and an evolutionary maximiser.
//! * [`objectives`]: synthetic benchmark objectives and external commands.
//! * [`search`]: the full search loop with simulated asynchronous workers.

pub mod archgraph;
pub mod evo;
pub mod gp;
pub mod objectives;
pub mod otmann;
pub mod search;
pub mod transport;

pub use archgraph::{Architecture, ArchHash, Label, NetClass};
