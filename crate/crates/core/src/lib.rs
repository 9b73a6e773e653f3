//! Latent-space planning agent for a desk-scale 2-D racing simulator.

pub mod adapt;
pub mod codec;
pub mod geom;
pub mod harness;
pub mod image;
pub mod latent;
pub mod policy;
pub mod rng;
pub mod sim;
pub mod vision;
