//! Synthetic object-detection training data from CAD models, with cue
//! ablations, HOG + linear SVM detectors, and VOC2007-style evaluation.
//!
//! The pipeline stages exchange data through [`dataset::DatasetManifest`]:
//! rendering writes it, patch sampling and training read it, and detection
//! plus evaluation score against its ground-truth boxes.

pub mod bbox;
pub mod dataset;
pub mod detect;
pub mod detector;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod mesh;
pub mod raster;
pub mod render;
pub mod seed;
pub mod toy;

pub use bbox::BBox;
pub use mesh::{Mesh, ViewLabel, ViewPreset};
pub use raster::{Mask, RgbImage};
pub use render::{BgMode, CueCell, CueConfig, RenderedImage, TxMode};
