//! Synthetic context-diverse datasets for few-shot object detection.
//!
//! The crate covers reference preprocessing ([`geometry`], [`filtering`]),
//! three compositing backends ([`compositing`]), dataset bookkeeping and
//! synthesis ([`dataset`]), VOC-style evaluation ([`evaluation`]) and the
//! instance/context diversity sweep ([`harness`]).

pub mod compositing;
pub mod dataset;
pub mod evaluation;
pub mod filtering;
pub mod geometry;
pub mod harness;
pub mod seed;
pub mod types;

pub use compositing::{Backend, CompositeError, CompositeResult, Compositor};
pub use dataset::{DatasetError, DatasetManifest};
pub use evaluation::{Detection, EvalReport};
pub use geometry::{AffineFamily, AffineOp, ResizeRecord};
pub use types::{
    iou, BBox, ClassLabel, ContextScene, LabelSpace, Mask, PlacementSpec, ReferenceInstance,
    SourceRef, Split,
};
