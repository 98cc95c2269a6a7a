//! Synthetic ground-truth benchmark: scene generation on analytic surfaces,
//! a corruption oracle emulating the view-inconsistencies of diffusion
//! material predictors, and the relighting evaluation harness.
//!
//! The real predictor is swappable: the interface is the per-view material
//! map files, and the oracle here is just one producer of them.

mod corrupt;
mod eval;
mod metrics;
mod scenegen;

pub use corrupt::{oracle_predict, CorruptionConfig};
pub use eval::{evaluate_relighting, run_ablation, AblationRow, RelightEval};
pub use metrics::{mean_excluding_infinite, psnr, MetricRow, MetricTable};
pub use scenegen::{
    generate_scene, make_env, EnvPreset, GroundTruth, MaterialDef, Pattern, PrimitiveSpec,
    SceneSpec, SynthScene,
};
