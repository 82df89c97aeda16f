//! Minimal reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters live in a
//! [`ParamStore`] outside the graph and are bound into it either as
//! trainable leaves or as constants, so one store can be optimized in one
//! pass and frozen in another (discriminator vs. generator steps).

mod adam;
mod conv;
mod gaussian;
pub mod gradcheck;
mod graph;
mod layers;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use gaussian::{kl_diag_gaussian, reparameterize, DiagGaussianLatent, LOGVAR_MAX, LOGVAR_MIN};
pub use graph::{Gradients, Graph, NodeId, Padding, Unary};
pub use layers::{group_count, Conv2d, GroupNorm, Linear, ResBlock};
pub use params::{Bound, ParamId, ParamStore};
