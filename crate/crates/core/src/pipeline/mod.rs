//! Localize-then-segment pipeline, training and experiment orchestration.

pub mod components;
pub mod dataset;
pub mod experiment;
pub mod infer;
pub mod localize;
pub mod schedule;
pub mod train;

pub use infer::{infer, InferConfig, InferOutput};
pub use localize::{localize, CoarseSegmenter, Localization, UnetLocalizer};
pub use schedule::StepDecay;
pub use train::{train, Phase, TrainCase, TrainConfig, TrainError, TrainHistory, TrainHooks};
