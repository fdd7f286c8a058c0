//! Skinning-free garment deformation via multi-view attribute images.
//!
//! The pipeline encodes garment and body geometry as position and normal
//! images rendered over a fixed template projection, transfers those
//! images with a pose-conditioned transformer, and recovers the deformed
//! 3D mesh by a two-stage multimodal fusion optimization.
//!
//! The `examples/` directory has one runnable example per capability;
//! the `drape` binary wires the same library calls into a batch CLI.

pub mod cli;
pub mod fusion;
pub mod geom;
pub mod image;
pub mod mesh;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod synth;
pub mod tensor;
pub mod transfer;
