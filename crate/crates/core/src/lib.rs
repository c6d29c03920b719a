//! Exact simulation of density-regulated multi-type spatial birth-death
//! populations and the numerics of their Fleming-Viot limit.
//!
//! Layers, bottom up: [`poly`] and [`model`] describe a model, [`flow`]
//! analyses its density dynamics, [`lambda`] solves for the mixing weights
//! `Λ(h)`, [`engine`] simulates the particle system, [`fvref`] provides the
//! limiting reference processes and [`stats`] compares the two.

pub mod config;
pub mod engine;
pub mod error;
pub mod flow;
pub mod fvref;
pub mod lambda;
pub mod model;
pub mod ode;
pub mod poly;
pub mod space;
pub mod stats;
pub mod validate;

pub use error::{FlowError, LambdaError, ModelError, SimError};
