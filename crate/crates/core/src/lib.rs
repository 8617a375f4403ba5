//! Reconstruction of 3D cardiac label geometry from sparse slice stacks.

pub mod error;
pub mod grid;
pub mod mesh;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod pipeline;
pub mod registration;
pub mod slicer;
pub mod ssa;
pub mod transform;

pub use error::{Error, Result};
pub use grid::{
    build_cardiac_frame, CardiacFrame, Grid3, Interp, LabelVolume, Mask3, Vec3, LABEL_NAMES, NUM_CHANNELS,
};
