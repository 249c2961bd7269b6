//! View-invariant cross-view descriptors and 3-DoF pose search.
//!
//! A ground panorama and a north-up satellite image are turned into
//! orientation-aware 1-D descriptors: the satellite features are resampled
//! into (azimuth, radius) coordinates around each candidate position, both
//! views are mapped onto a shared vertical axis with positional attention,
//! and every azimuth column is compressed by a small MLP. Matching the
//! descriptors over a grid of candidate poses gives a coarse pose, which a
//! regression head refines.

pub mod autograd;
pub mod cepa;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod posesearch;
pub mod reconstruction;
pub mod tensor;

pub use autograd::{ConvSpec, Gradients, PadMode, Tape, Var};
pub use error::{CoreError, Result};
pub use geometry::{ImageFrame, PolarConfig, Pose, PoseGrid};
pub use tensor::Tensor;
