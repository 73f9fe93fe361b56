//! Compositing backends. Each one pastes a reference into a context at a
//! placement and reports the new ground-truth box.

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filtering::FilterError;
use crate::geometry::{self, GeometryError};
use crate::types::{BBox, ContextScene, Mask, PlacementSpec, ReferenceInstance, TypeError};

pub mod diffusion;
pub mod poisson;

pub use diffusion::{
    compose_diffusion, ClientConfig, CoarseFeature, ConditioningBundle, DiffusionCompositor, IntegrateRequest, IntegrateResponse,
    IntegrationClient, HttpTransport, MockTransport, Transport, TransportError,
};
pub use poisson::{compose_poisson, PoissonCompositor, PoissonParams, PoissonProblem, PoissonSolution};

#[derive(Debug, Error)]
pub enum CompositeError {
    #[error("placement {target} does not fit a {width}x{height} context")]
    OutOfBounds { target: BBox, width: u32, height: u32 },
    #[error("mask touches the context border at ({x}, {y})")]
    MaskTouchesBorder { x: u32, y: u32 },
    #[error("mask has no pixels inside the placement")]
    EmptyMask,
    #[error("coarse feature must be 257x1536, got {rows}x{cols}")]
    FeatureShape { rows: usize, cols: usize },
    #[error("service returned a {got_width}x{got_height} image for a {expected_width}x{expected_height} context")]
    DimensionMismatch {
        expected_width: u32,
        expected_height: u32,
        got_width: u32,
        got_height: u32,
    },
    #[error("service protocol error: {0}")]
    Protocol(String),
    #[error("service request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("service transport failed: {0}")]
    Transport(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Type(#[from] TypeError),
}

impl CompositeError {
    /// True for failures on the remote-service side.
    pub fn is_service(&self) -> bool {
        matches!(
            self,
            CompositeError::DimensionMismatch { .. }
                | CompositeError::Protocol(_)
                | CompositeError::Timeout { .. }
                | CompositeError::Transport(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Naive,
    Poisson,
    Diffusion,
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backend::Naive => "naive",
            Backend::Poisson => "poisson",
            Backend::Diffusion => "diffusion",
        })
    }
}

impl std::str::FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "naive" | "copy-paste" => Ok(Backend::Naive),
            "poisson" => Ok(Backend::Poisson),
            "diffusion" => Ok(Backend::Diffusion),
            other => Err(format!("unknown backend {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeResult {
    pub pixels: RgbImage,
    pub new_box: BBox,
    pub backend: Backend,
    pub solver_stats: Option<SolverStats>,
}

/// A compositing backend usable by the synthesis loop.
pub trait Compositor: Sync {
    fn backend(&self) -> Backend;

    /// Minimum distance in pixels a placement must keep from the image edge.
    fn border_margin(&self) -> u32 {
        0
    }

    /// `seed` drives any randomness inside the backend.
    fn compose(
        &self,
        context: &ContextScene,
        reference: &ReferenceInstance,
        placement: &PlacementSpec,
        seed: u64,
    ) -> Result<CompositeResult, CompositeError>;
}

fn check_placement(context: &ContextScene, placement: &PlacementSpec) -> Result<(), CompositeError> {
    let (w, h) = context.dimensions();
    if placement.context_dimensions() != (w, h) || !placement.target().is_within(w, h) {
        return Err(CompositeError::OutOfBounds {
            target: placement.target(),
            width: w,
            height: h,
        });
    }
    Ok(())
}

/// Reference pixels and mask resampled to the placement rectangle.
pub(crate) fn fit_to_placement(
    reference: &ReferenceInstance,
    placement: &PlacementSpec,
) -> Result<(RgbImage, Mask), GeometryError> {
    let rect = placement.pixel_rect();
    Ok((
        geometry::resize_bilinear(reference.pixels(), rect.width, rect.height)?,
        geometry::resize_mask(reference.mask(), rect.width, rect.height)?,
    ))
}

/// Plain copy-paste: resampled reference pixels overwrite the context where
/// the resampled mask is set.
pub fn compose_naive(
    context: &ContextScene,
    reference: &ReferenceInstance,
    placement: &PlacementSpec,
) -> Result<CompositeResult, CompositeError> {
    check_placement(context, placement)?;
    let rect = placement.pixel_rect();
    let (src, mask) = fit_to_placement(reference, placement)?;
    let mut out = context.pixels().clone();
    for (x, y, p) in src.enumerate_pixels() {
        if mask.get(x, y) {
            out.put_pixel(rect.x + x, rect.y + y, *p);
        }
    }
    Ok(CompositeResult {
        pixels: out,
        new_box: placement.target(),
        backend: Backend::Naive,
        solver_stats: None,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NaiveCompositor;

impl Compositor for NaiveCompositor {
    fn backend(&self) -> Backend {
        Backend::Naive
    }

    fn compose(
        &self,
        context: &ContextScene,
        reference: &ReferenceInstance,
        placement: &PlacementSpec,
        _seed: u64,
    ) -> Result<CompositeResult, CompositeError> {
        compose_naive(context, reference, placement)
    }
}
