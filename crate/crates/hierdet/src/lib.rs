//! Desk-scale two-stage object detector with multi-grained detection heads.
//!
//! The crate trains and compares four detection-head configurations — a
//! single-branch baseline, multi-grained branches with and without
//! superclass grouping, and merged heads — on a deterministic synthetic,
//! class-imbalanced dataset, and evaluates them with COCO-style metrics and
//! per-category reports.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! training instantiates `f32`, high-precision oracle checks use `f64`.

pub mod boxgeom;
pub mod losses;
pub mod scalar;
pub mod taxonomy;

pub use scalar::Scalar;

/// Box type used on dataset/evaluation surfaces.
pub type BBox64 = boxgeom::BBox<f64>;
/// Box type used inside the `f32` training path.
pub type BBox32 = boxgeom::BBox<f32>;
