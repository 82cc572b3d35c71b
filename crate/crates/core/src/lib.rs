//! Caption-driven weak box annotation.
//!
//! Per-image feature bundles (cross-attention rows, their gradients, ViT keys)
//! are turned into labeled boxes: Grad-CAM seed selection, key-similarity seed
//! expansion, mixture-based heatmap thresholding and segment boxing. Phrase
//! grounding, caption category matching, pseudo-label NMS and the evaluation
//! metrics live alongside.

pub mod bundle;
pub mod cli;
pub mod coco;
pub mod codec;
pub mod config;
pub mod error;
pub mod expand;
pub mod geometry;
pub mod gmm;
pub mod gradcam;
pub mod grounding;
pub mod metrics;
pub mod nms;
pub mod render;
pub mod segment;
pub mod synth;

pub use error::{Error, Result};
