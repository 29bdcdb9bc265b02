//! Radiance-field reconstruction that ignores transient distractors.
//!
//! Views come with 2D bounding boxes around distractors (snow, confetti,
//! petals). Pixels inside a box never supervise the field, and the samples
//! along such rays have their encoded features zeroed. What remains is a
//! multi-resolution hash grid plus two small MLPs, trained with a photometric
//! loss, a multi-view compensation term, and a patch-level perceptual term.
//!
//! The crate also ships a synthetic benchmark ([`synthbench`]) that renders an
//! analytic scene clean and corrupted, so reconstruction quality inside the
//! boxes can be scored against an exact reference ([`metrics`]).

pub mod checkpoint;
pub mod detector_math;
pub mod error;
pub mod geometry;
pub mod hash_encoding;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod radiance_field;
pub mod real;
pub mod scene_io;
pub mod synthbench;
pub mod trainer;
pub mod volume_renderer;

pub use error::{Error, Result};
pub use geometry::{Aabb, Mat3, Vec3};
pub use hash_encoding::{HashGrid, HashGridConfig};
pub use image::Image;
pub use radiance_field::{FieldConfig, FieldNetwork};
pub use scene_io::{BBox, CameraModel, Pose, ViewRecord};
pub use trainer::{TrainConfig, Trainer};
pub use volume_renderer::{RadianceModel, SamplingConfig};
