//! Lift per-view 2D PBR material maps onto a 3D Gaussian scene, merge them
//! into view-consistent per-Gaussian materials with a softmax-constrained
//! neural merger, and refine materials jointly with an optimizable
//! environment map through differentiable deferred shading.
//!
//! The pipeline is staged:
//!
//! 1. [`bench::generate_scene`] / external predictors produce a scene with
//!    per-view material maps (basecolor, roughness, metallic).
//! 2. [`raytrace::collect_footprints`] + [`raytrace::lift_materials_median`]
//!    assign per-view materials to Gaussians via analytic ray tracing.
//! 3. [`refine::refine`] trains the per-channel neural mergers and the
//!    environment map against the 2D predictions and the input photographs.
//! 4. [`bench::evaluate_relighting`] scores the result under held-out
//!    illumination.
//!
//! Each stage is also exposed as a `matlift` CLI subcommand; see the
//! `examples/` directory for library-level walkthroughs.

pub mod bench;
pub mod cli;
pub mod error;
pub mod img;
pub mod merger;
pub mod raytrace;
pub mod real;
pub mod render;
pub mod refine;
pub mod scene;
pub mod shading;

pub use error::Error;
pub use real::Real;
