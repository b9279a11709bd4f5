//! Mesh-wise demographic composition estimation from satellite imagery.
//!
//! A pipeline library and CLI that turns multispectral daytime imagery,
//! derived spectral indices and night-time lights into per-mesh predictions
//! of three population groups (0-14, 15-64, 65+) using a four-head
//! ResNet50-transfer regression network, trained on census years and applied
//! to non-census years.

pub mod archive;
pub mod dataset;
pub mod model;
pub mod train;
pub mod nn;
pub mod mesh;
pub mod raster;
pub mod tile;
