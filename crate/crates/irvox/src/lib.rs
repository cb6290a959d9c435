//! Inverse rendering of volume density, surface normals, spatially-varying
//! BRDF, and spherical-Gaussian environment illumination from posed
//! multi-view images, built on a vector-matrix factorized tensor field.
//!
//! The engine jointly optimizes a radiance field and a physically-based
//! rendering model over shared tensor features: radiance-field ray marching
//! reconstructs geometry and view-dependent appearance, while Monte Carlo
//! surface shading with online second-bounce visibility and indirect light
//! recovers albedo, roughness, and lighting. Single and multi-light
//! captures are supported through an optional lighting dimension in the
//! appearance tensor.
//!
//! Start with the runnable programs under `examples/`, or the `irvox`
//! binary for batch dataset generation, training, rendering, relighting,
//! and evaluation.

// Indexed loops in the math kernels mirror the tensor layouts they walk;
// several backward passes legitimately take many parameters.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]

pub mod autodiff;
pub mod cli;
pub mod decoders;
pub mod losses;
pub mod math;
pub mod oracle;
pub mod scene;
pub mod scene_io;
pub mod shading;
pub mod tensor_field;
pub mod trainer;
pub mod volume_render;

pub use autodiff::{Adam, Grads, LrGroup, ParamId, ParamStore, Tape, ValueId};
pub use math::{Aabb, Real, RngKey, StreamRng, StreamTag, Vec3};
