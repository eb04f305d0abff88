//! sonotrack — a deterministic simulator and signal-processing toolkit for
//! robot-assisted 4D ultrasound target tracking and 3D ultrasound
//! localisation microscopy (ULM).
//!
//! The crate covers the whole closed loop in software: a world model of a
//! moving microvasculature phantom ([`scene`]), point-scatterer channel-data
//! simulation and a fast PSF-splat volume synthesizer ([`acoustics`]),
//! volumetric delay-and-sum beamforming ([`beamform`]), 3-DoF translation
//! registration ([`registration`]), a discrete-event simulation of the
//! asynchronous acquisition/processing/robot timeline ([`trackloop`]), the
//! offline super-resolution pipeline ([`ulm`]) and quantitative evaluation
//! ([`metrics`]). The `sonotrack` binary orchestrates experiments from a
//! plain-text config ([`config`], [`cli`]).
//!
//! Everything is deterministic: a fixed seed reproduces byte-identical
//! outputs, regardless of thread count.

pub mod acoustics;
pub mod beamform;
pub mod cli;
pub mod config;
pub mod error;
pub mod fft;
pub mod geom;
pub mod metrics;
pub mod record;
pub mod registration;
pub mod rng;
pub mod scene;
pub mod trackloop;
pub mod ulm;
pub mod util;
pub mod volume;

pub use error::{Error, Result};
pub use geom::Vec3;
pub use volume::{Grid3, Volume};
