//! Weakly supervised object localization by beam search over feature-map
//! sub-grids.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod eval;
pub mod format;
pub mod heatmap;
pub mod pipeline;
pub mod provider;
pub mod scoring;
pub mod search;
pub mod tensor;

pub use error::{BridgeError, Error, Result};
pub use heatmap::{Detection, HeatMap, PointResponse};
pub use provider::{FeatureProvider, SyntheticProvider};
pub use scoring::{ClassScores, CooccurrenceMatrix, ScoringHead};
pub use search::{BeamConfig, BeamTrace, Localizer, SearchNode};
pub use tensor::{FeatureMap, GridBox, PixelRect};
