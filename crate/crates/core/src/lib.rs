//! Hierarchically fused multi-task U-Net for low-contrast volumetric
//! segmentation: synthetic phantoms, contour heatmap targets, a small
//! reverse-mode autodiff engine, the network families, losses, metrics and
//! the localize-then-segment pipeline.

pub mod autograd;
pub mod cli;
pub mod config;
pub mod contour;
pub mod features;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod patches;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod volume;
