//! Distributed finite-time cooperative localization of 3D sensor networks.
//!
//! Nodes discover order-5 cliques, turn ranges into barycentric coordinates,
//! check their own localizability with a distributed orthogonal iteration and
//! recover their positions with a distributed conjugate gradient whose global
//! scalars come from finite-time K-max consensus sums.

// NaN-rejecting `!(a < b)` guards and index loops in the numeric kernels are deliberate
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod collective;
pub mod consensus;
pub mod geometry;
pub mod graph;
pub mod local_sum;
pub mod localization;
pub mod pipeline;
pub mod reference;
pub mod runtime;
pub mod scenario;
pub mod verification;

pub use geometry::{BarycentricQuad, Point3};
pub use graph::{Clique5, Configuration, NodeId, SensorNetwork, WeightedClique};
