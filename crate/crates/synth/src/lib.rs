//! Synthetic cross-view scenes: a flat world of roads, ground patches and
//! box buildings, rendered as a north-up satellite raster and as cylindrical
//! panoramas from camera poses on the roads.

pub mod dataset;
pub mod error;
pub mod render;
pub mod scene;

pub use dataset::{generate_dataset, read_dataset, write_dataset, Dataset, GenParams, Manifest, SamplePair};
pub use error::{Result, SynthError};
pub use render::{render_ground, render_satellite, RenderParams};
pub use scene::{generate_scene, SceneParams, SceneSpec};
