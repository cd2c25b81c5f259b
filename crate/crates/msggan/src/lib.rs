//! Multi-scale-gradient GAN: architecture schedules, a define-by-run autodiff
//! graph with higher-order gradients, generator and discriminator builders,
//! adversarial losses, and a deterministic training engine.

pub mod arch_spec;
pub mod checkpoint;
pub mod cli;
pub mod combine;
pub mod config;
pub mod data;
pub mod device;
pub mod discriminator;
pub mod error;
pub mod extractor;
pub mod generator;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod registry;
pub mod rng;
pub mod tensor;
pub mod training;
