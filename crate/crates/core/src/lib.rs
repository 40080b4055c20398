//! Deterministic follow-the-leader traffic simulation on road networks with
//! equilibrium route choice and vehicle-to-vehicle knowledge sharing.

// NaN-aware range checks read as `!(x > 0.0)` on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::too_many_arguments)]

pub mod dynamics;
pub mod equilibrium;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod network;
pub mod parallel;
pub mod routing;
pub mod v2v;
