//! lobekit — pulmonary lobe segmentation toolkit.
//!
//! The pipeline: MetaImage volumes are HU-normalized, the lungs extracted by
//! OTSU binarization + per-slice morphology + 3D component selection, a
//! per-slice convex hull of the lungs (dilated 5x5) defines a tight crop;
//! a one-downsampling residual V-Net trains on the crops under a hybrid
//! dice + focal objective with shift/flip/rotate augmentation and Adam, and
//! predictions are scored by per-lobe dice. A seeded phantom generator
//! provides ground-truthed synthetic chests so the whole loop runs at desk
//! scale.
//!
//! With the default `parallel` feature the inner loops run on rayon;
//! without it the same code runs sequentially. Either way results are
//! bit-identical for a fixed seed: every parallel site partitions its
//! output by index and keeps reduction order fixed.

pub mod augment;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod exec;
pub mod loss;
pub mod metaimage;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod preprocess;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
