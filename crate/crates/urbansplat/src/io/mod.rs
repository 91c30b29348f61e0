//! File formats the toolkit speaks on disk: PFM float maps for depth,
//! ASCII PLY for point clouds, and 8-bit PNG for images and masks.

pub mod pfm;
pub mod ply;
pub mod png;
