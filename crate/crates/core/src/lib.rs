//! Render-and-compare 6-DoF pose refinement against a Gaussian splatting
//! model of the object.
//!
//! The pipeline: [`render`] rasterizes a [`GaussianCloud`] under a pose,
//! [`backward`] propagates image-space loss gradients to Lie-algebra pose
//! perturbations and appearance parameters, and [`refine`] runs the staged
//! optimization loop. [`harness`] provides synthetic scenes and pose metrics.

pub mod backward;
pub mod camera;
pub mod gradcheck;
pub mod harness;
pub mod image;
pub mod lie;
pub mod loss;
pub mod model;
pub mod optim;
pub mod ply;
pub mod refine;
pub mod render;
pub mod sh;
pub mod util;

#[cfg(test)]
mod testutil;

pub use camera::CameraIntrinsics;
pub use image::{Image, Mask};
pub use lie::{Pose, Tangent};
pub use model::{GaussianCloud, ParamMask};
pub use render::{render, render_reference, RenderOutput};
