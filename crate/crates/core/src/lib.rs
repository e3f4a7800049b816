//! Coarse-label pre-training for LiDAR semantic segmentation.
//!
//! Heterogeneous datasets are unified through a small coarse taxonomy,
//! a per-voxel classifier is pre-trained on the union, and its
//! classification head is replaced before finetuning on a target dataset's
//! own labels.

pub mod featurize;
pub mod harness;
pub mod lidar_io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod seed;
pub mod synthgen;
pub mod taxonomy;

/// Target index that losses and metrics skip.
pub const IGNORE_CLASS: u32 = u32::MAX;
