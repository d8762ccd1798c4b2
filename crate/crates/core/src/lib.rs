//! Gaze-based procedural mistake detection.
//!
//! A transformer completes the second half of a gaze trajectory from a window
//! of feature grids and the first half of the trajectory; the disagreement
//! between the completion and the recorded gaze is the mistake score.

pub mod tensor;
pub mod graph;
pub mod optim;
pub mod heatmap;
pub mod model;
pub mod scoring;
pub mod pipeline;
pub mod synth;
pub mod eval;
pub mod io;
pub mod config;
pub mod seed;

pub use heatmap::{GazePoint, GazeTrajectory, HeatmapStack};
pub use model::{ClipWindow, CompletionModel, FusionMode, ModelConfig};
pub use scoring::{ScoreFunction, ScoreRecord};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
