//! Fractal wedge-tube constructions and directional-derivative
//! almost-maximization in low ambient dimension.

pub mod ambient;
pub mod analysis;
pub mod config;
pub mod error;
pub mod geometry;
pub mod maximizer;
pub mod tubes;
pub mod verification;
