//! Camera-only 3D semantic occupancy prediction with forward-backward view
//! transformation.
//!
//! Pipeline: a small image encoder predicts context features and a per-pixel
//! depth distribution; [`forward_vtm`] lifts and splats them into a voxel
//! volume; [`backward_vtm`] compresses the volume to BEV queries and refines
//! them by depth-weighted sampling of image features; [`occ_head`] expands and
//! fuses both representations and classifies every voxel. [`losses`],
//! [`metrics`] and [`postprocess`] cover training objectives, evaluation and
//! test-time augmentation / ensembling. [`scene`] and [`pipeline`] provide
//! synthetic scenes with exact ground truth and the end-to-end driver.

pub mod backward_vtm;
pub mod container;
pub mod error;
pub mod forward_vtm;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod occ_head;
pub mod pipeline;
pub mod postprocess;
pub mod scene;

pub use error::{Error, Result};

/// Semantic classes including free space.
pub const NUM_CLASSES: usize = 18;
/// Label of an unoccupied voxel.
pub const FREE_LABEL: u8 = 17;

/// Class names in label order.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "others",
    "barrier",
    "bicycle",
    "bus",
    "car",
    "construction_vehicle",
    "motorcycle",
    "pedestrian",
    "traffic_cone",
    "trailer",
    "truck",
    "driveable_surface",
    "other_flat",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
    "free",
];

pub fn class_id(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&n| n == name)
}
