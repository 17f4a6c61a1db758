//! Strip adjustment for mobile LiDAR: pose corrections for scan trajectories
//! estimated against a latent planar surface map.

pub mod geom;
pub mod segmentation;
pub mod strip;
pub mod synth;
pub mod latent_map;
pub mod blocks;
pub mod solver;
pub mod engine;
pub mod diagnostics;
pub mod config;
pub mod error;
pub mod pipeline;

pub use config::{IterationPlan, PipelineConfig, PlanStep};
pub use error::{ErrorClass, PipelineError};
pub use geom::{AnchorChain, PoseCorrection, TrajectoryId, Vec3};
pub use pipeline::{estimate_iteration, preprocess, run_schedule, CorrectionsSet, IterationStats, WorkDir};
pub use strip::{read_strip, write_strip, ScanStrip, StripId, StripPoint};
