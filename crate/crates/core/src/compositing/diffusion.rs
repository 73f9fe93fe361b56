//! Client side of the diffusion integration service.
//!
//! The generation itself runs remotely. This module owns the conditioning
//! bundle, its JSON/PNG wire encoding, retry and concurrency limits, and a
//! deterministic in-process stand-in for the service's mock mode.

use std::io::Cursor;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use image::{DynamicImage, ImageFormat, Rgb, RgbImage};
use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::{check_placement, Backend, CompositeError, CompositeResult, Compositor};
use crate::filtering::{self, StitchCollage};
use crate::geometry::{self, AffineFamily};
use crate::types::{ContextScene, Mask, PlacementSpec, ReferenceInstance};

pub const FEATURE_ROWS: usize = 257;
pub const FEATURE_COLS: usize = 1536;

/// Reference embedding as produced by the coarse encoder, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseFeature {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl CoarseFeature {
    /// Any shape is representable; [`CoarseFeature::validate`] enforces the
    /// wire shape.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, CompositeError> {
        if data.len() != rows * cols {
            return Err(CompositeError::Protocol(format!(
                "coarse_feature has {} values for a {rows}x{cols} shape",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn validate(&self) -> Result<(), CompositeError> {
        if (self.rows, self.cols) != (FEATURE_ROWS, FEATURE_COLS) {
            return Err(CompositeError::FeatureShape {
                rows: self.rows,
                cols: self.cols,
            });
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(CompositeError::Protocol(
                "coarse_feature contains non-finite values".into(),
            ));
        }
        Ok(())
    }

    fn to_rows(&self) -> Vec<Vec<f32>> {
        self.data.chunks(self.cols.max(1)).map(<[f32]>::to_vec).collect()
    }
}

/// Everything the denoiser is conditioned on: the context, the region mask,
/// the stitched edge collage and the reference (or its embedding).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub context_pixels: RgbImage,
    pub region_mask: Mask,
    pub stitch: StitchCollage,
    pub coarse_feature: Option<CoarseFeature>,
    pub reference_pixels: RgbImage,
}

impl ConditioningBundle {
    pub fn new(
        context: &ContextScene,
        reference: &ReferenceInstance,
        placement: &PlacementSpec,
        stitch: StitchCollage,
        coarse_feature: Option<CoarseFeature>,
    ) -> Result<Self, CompositeError> {
        check_placement(context, placement)?;
        let rect = placement.pixel_rect();
        let (w, h) = context.dimensions();
        let bundle = Self {
            context_pixels: context.pixels().clone(),
            region_mask: Mask::from_fn(w, h, |x, y| rect.contains(x, y)),
            stitch,
            coarse_feature,
            reference_pixels: reference.pixels().clone(),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<(), CompositeError> {
        let dims = self.context_pixels.dimensions();
        if self.region_mask.dimensions() != dims || self.stitch.canvas().dimensions() != dims {
            return Err(CompositeError::Protocol(format!(
                "mask {:?} and stitch {:?} must match context {:?}",
                self.region_mask.dimensions(),
                self.stitch.canvas().dimensions(),
                dims
            )));
        }
        if let Some(f) = &self.coarse_feature {
            f.validate()?;
        }
        Ok(())
    }
}

/// JSON body of `POST /v1/integrate`. Images are base64-encoded PNGs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrateRequest {
    pub context: String,
    pub mask: String,
    pub stitch: String,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coarse_feature: Option<Vec<Vec<f32>>>,
    pub steps: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrateResponse {
    pub image: String,
    pub mode: String,
    #[serde(default)]
    pub timing_ms: f64,
}

pub fn encode_png(img: &DynamicImage) -> String {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    B64.encode(buf.into_inner())
}

pub fn decode_png(data: &str) -> Result<DynamicImage, String> {
    let bytes = B64.decode(data).map_err(|e| format!("bad base64: {e}"))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| format!("bad PNG: {e}"))
}

impl IntegrateRequest {
    pub fn from_bundle(bundle: &ConditioningBundle, steps: u32, seed: u64) -> Self {
        Self {
            context: encode_png(&DynamicImage::ImageRgb8(bundle.context_pixels.clone())),
            mask: encode_png(&DynamicImage::ImageLuma8(bundle.region_mask.to_visible())),
            stitch: encode_png(&DynamicImage::ImageLuma8(bundle.stitch.to_gray())),
            reference: encode_png(&DynamicImage::ImageRgb8(bundle.reference_pixels.clone())),
            coarse_feature: bundle.coarse_feature.as_ref().map(CoarseFeature::to_rows),
            steps,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    Timeout,
    Status { code: u16, body: String },
    Io(String),
    Decode(String),
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportError::Timeout => f.write_str("timed out"),
            TransportError::Status { code, body } => write!(f, "HTTP {code}: {body}"),
            TransportError::Io(e) => write!(f, "I/O: {e}"),
            TransportError::Decode(e) => write!(f, "decode: {e}"),
        }
    }
}

/// Carries one integrate call to a service.
pub trait Transport: Send + Sync {
    fn integrate(
        &self,
        request: &IntegrateRequest,
        timeout: Duration,
    ) -> Result<IntegrateResponse, TransportError>;
}

/// HTTP/1.1 JSON transport.
#[derive(Debug)]
pub struct HttpTransport {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    /// `endpoint` is the service base URL, e.g. `http://127.0.0.1:8000`.
    pub fn new(endpoint: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_owned(),
            agent,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

fn classify(err: ureq::Error) -> TransportError {
    match err {
        ureq::Error::Timeout(_) => TransportError::Timeout,
        ureq::Error::Io(e) if matches!(e.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) => {
            TransportError::Timeout
        }
        other => TransportError::Io(other.to_string()),
    }
}

impl Transport for HttpTransport {
    fn integrate(
        &self,
        request: &IntegrateRequest,
        timeout: Duration,
    ) -> Result<IntegrateResponse, TransportError> {
        let body = serde_json::to_string(request).map_err(|e| TransportError::Decode(e.to_string()))?;
        let url = format!("{}/v1/integrate", self.endpoint);
        let mut resp = self
            .agent
            .post(&url)
            .config()
            .timeout_global(Some(timeout))
            .build()
            .header("content-type", "application/json")
            .send(body.as_bytes())
            .map_err(classify)?;
        let code = resp.status().as_u16();
        let text = resp
            .body_mut()
            .with_config()
            .limit(1 << 30)
            .read_to_string()
            .map_err(classify)?;
        if code != 200 {
            return Err(TransportError::Status { code, body: text });
        }
        serde_json::from_str(&text).map_err(|e| TransportError::Decode(e.to_string()))
    }
}

/// Width of the linear alpha ramp used by the mock service.
pub const MOCK_FEATHER: u32 = 4;

/// Deterministic stand-in for the service's mock mode: the reference is
/// resized to the region's bounding box and alpha-blended in, with alpha
/// ramping linearly over [`MOCK_FEATHER`] pixels from the region boundary.
pub fn mock_integrate(request: &IntegrateRequest) -> Result<IntegrateResponse, TransportError> {
    let ctx = decode_png(&request.context).map_err(TransportError::Decode)?.to_rgb8();
    let mask = Mask::from_gray(&decode_png(&request.mask).map_err(TransportError::Decode)?.to_luma8());
    let reference = decode_png(&request.reference).map_err(TransportError::Decode)?.to_rgb8();
    if mask.dimensions() != ctx.dimensions() {
        return Err(TransportError::Status {
            code: 400,
            body: format!("mask {:?} does not match context {:?}", mask.dimensions(), ctx.dimensions()),
        });
    }
    let mut out = ctx.clone();
    if let Some((x0, y0, x1, y1)) = mask.tight_bounds() {
        let patch = geometry::resize_bilinear(&reference, x1 - x0, y1 - y0)
            .map_err(|e| TransportError::Decode(e.to_string()))?;
        let (w, h) = mask.dimensions();
        let r = MOCK_FEATHER as i64;
        for y in y0..y1 {
            for x in x0..x1 {
                if !mask.get(x, y) {
                    continue;
                }
                // Chebyshev distance to the nearest unmasked pixel, capped
                let mut d = MOCK_FEATHER;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (qx, qy) = (x as i64 + dx, y as i64 + dy);
                        let outside = qx < 0
                            || qy < 0
                            || qx >= i64::from(w)
                            || qy >= i64::from(h)
                            || !mask.get(qx as u32, qy as u32);
                        if outside {
                            d = d.min(dx.unsigned_abs().max(dy.unsigned_abs()) as u32);
                        }
                    }
                }
                let alpha = f64::from(d) / f64::from(MOCK_FEATHER);
                let p = patch.get_pixel(x - x0, y - y0);
                let c = ctx.get_pixel(x, y);
                let blended = Rgb(std::array::from_fn(|i| {
                    (alpha * f64::from(p[i]) + (1.0 - alpha) * f64::from(c[i])).round() as u8
                }));
                out.put_pixel(x, y, blended);
            }
        }
    }
    Ok(IntegrateResponse {
        image: encode_png(&DynamicImage::ImageRgb8(out)),
        mode: "mock".into(),
        timing_ms: 0.0,
    })
}

/// In-process transport running [`mock_integrate`].
#[derive(Debug, Clone, Copy, Default)]
pub struct MockTransport;

impl Transport for MockTransport {
    fn integrate(
        &self,
        request: &IntegrateRequest,
        _timeout: Duration,
    ) -> Result<IntegrateResponse, TransportError> {
        if let Some(f) = &request.coarse_feature {
            let cols = f.first().map_or(0, Vec::len);
            if f.len() != FEATURE_ROWS || f.iter().any(|r| r.len() != FEATURE_COLS) {
                return Err(TransportError::Status {
                    code: 400,
                    body: format!("coarse_feature must be 257x1536, got {}x{cols}", f.len()),
                });
            }
        }
        mock_integrate(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub timeout: Duration,
    /// Extra attempts after a timed-out request.
    pub retries: u32,
    pub max_in_flight: usize,
    pub steps: u32,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(120),
            retries: 2,
            max_in_flight: 4,
            steps: 50,
        }
    }
}

#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Thread-safe client with a bounded number of in-flight requests.
pub struct IntegrationClient {
    transport: Box<dyn Transport>,
    config: ClientConfig,
    slots: Slots,
}

impl std::fmt::Debug for IntegrationClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IntegrationClient")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl IntegrationClient {
    pub fn new(transport: Box<dyn Transport>, config: ClientConfig) -> Self {
        let slots = Slots {
            free: Mutex::new(config.max_in_flight.max(1)),
            cv: Condvar::new(),
        };
        Self {
            transport,
            config,
            slots,
        }
    }

    pub fn http(endpoint: impl Into<String>, config: ClientConfig) -> Self {
        Self::new(Box::new(HttpTransport::new(endpoint)), config)
    }

    pub fn mock(config: ClientConfig) -> Self {
        Self::new(Box::new(MockTransport), config)
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    /// Validates and sends the bundle, retrying timed-out attempts, and
    /// returns the composited context-sized image.
    pub fn integrate(&self, bundle: &ConditioningBundle, seed: u64) -> Result<RgbImage, CompositeError> {
        bundle.validate()?;
        let request = IntegrateRequest::from_bundle(bundle, self.config.steps, seed);
        let attempts = self.config.retries + 1;
        let mut response = None;
        for attempt in 1..=attempts {
            let _slot = self.slots.acquire();
            let started = Instant::now();
            match self.transport.integrate(&request, self.config.timeout) {
                Ok(r) => {
                    debug!("integrate attempt {attempt} ok in {:?} ({})", started.elapsed(), r.mode);
                    response = Some(r);
                    break;
                }
                Err(TransportError::Timeout) => {
                    warn!("integrate attempt {attempt}/{attempts} timed out");
                }
                Err(TransportError::Status { code, body }) => {
                    return Err(CompositeError::Protocol(format!("HTTP {code}: {body}")));
                }
                Err(TransportError::Decode(e)) => return Err(CompositeError::Protocol(e)),
                Err(TransportError::Io(e)) => return Err(CompositeError::Transport(e)),
            }
        }
        let response = response.ok_or(CompositeError::Timeout { attempts })?;
        let img = decode_png(&response.image)
            .map_err(CompositeError::Protocol)?
            .to_rgb8();
        let (ew, eh) = bundle.context_pixels.dimensions();
        let (gw, gh) = img.dimensions();
        if (gw, gh) != (ew, eh) {
            return Err(CompositeError::DimensionMismatch {
                expected_width: ew,
                expected_height: eh,
                got_width: gw,
                got_height: gh,
            });
        }
        Ok(img)
    }
}

/// Sends the bundle to the service and wraps the returned image.
pub fn compose_diffusion(
    client: &IntegrationClient,
    bundle: &ConditioningBundle,
    placement: &PlacementSpec,
    seed: u64,
) -> Result<CompositeResult, CompositeError> {
    let pixels = client.integrate(bundle, seed)?;
    Ok(CompositeResult {
        pixels,
        new_box: placement.target(),
        backend: Backend::Diffusion,
        solver_stats: None,
    })
}

/// Builds the conditioning bundle per placement and calls the service.
#[derive(Debug)]
pub struct DiffusionCompositor {
    pub client: IntegrationClient,
    pub family: AffineFamily,
}

impl DiffusionCompositor {
    pub fn new(client: IntegrationClient) -> Self {
        Self {
            client,
            family: AffineFamily::default(),
        }
    }
}

impl Compositor for DiffusionCompositor {
    fn backend(&self) -> Backend {
        Backend::Diffusion
    }

    fn compose(
        &self,
        context: &ContextScene,
        reference: &ReferenceInstance,
        placement: &PlacementSpec,
        seed: u64,
    ) -> Result<CompositeResult, CompositeError> {
        let (stitch, _) = filtering::build_stitch(reference, placement, &self.family, seed)?;
        let bundle = ConditioningBundle::new(context, reference, placement, stitch, None)?;
        compose_diffusion(&self.client, &bundle, placement, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{BBox, ClassLabel, SourceRef};

    fn scene() -> (ContextScene, ReferenceInstance, PlacementSpec) {
        let ctx = ContextScene::new("c", RgbImage::from_pixel(32, 24, Rgb([20, 40, 60])), vec![], true).unwrap();
        let r = ReferenceInstance::new(
            RgbImage::from_fn(10, 10, |x, y| Rgb([(x * 25) as u8, (y * 25) as u8, 200])),
            Mask::full(10, 10),
            ClassLabel::novel("windmill"),
            SourceRef {
                image_id: "s".into(),
                bbox: BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            },
        )
        .unwrap();
        let p = PlacementSpec::in_context(BBox::new(4.0, 4.0, 16.0, 16.0).unwrap(), &ctx).unwrap();
        (ctx, r, p)
    }

    #[test]
    fn mock_mode_is_deterministic_and_context_sized() {
        let (ctx, r, p) = scene();
        let client = IntegrationClient::mock(ClientConfig::default());
        let comp = DiffusionCompositor::new(client);
        let a = comp.compose(&ctx, &r, &p, 5).unwrap();
        let b = comp.compose(&ctx, &r, &p, 5).unwrap();
        assert_eq!(a.pixels.dimensions(), (32, 24));
        assert_eq!(a, b);
        assert_eq!(a.new_box, p.target());
        // outside the region untouched, region centre fully replaced
        assert_eq!(*a.pixels.get_pixel(0, 0), Rgb([20, 40, 60]));
        assert_ne!(*a.pixels.get_pixel(10, 10), Rgb([20, 40, 60]));
    }

    #[test]
    fn mock_feather_ramps_from_boundary() {
        let (ctx, r, p) = scene();
        let stitch = filtering::build_stitch_with(&r, &p, geometry::AffineOp::Identity).unwrap();
        let bundle = ConditioningBundle::new(&ctx, &r, &p, stitch, None).unwrap();
        let req = IntegrateRequest::from_bundle(&bundle, 1, 0);
        let out = decode_png(&mock_integrate(&req).unwrap().image).unwrap().to_rgb8();
        // blue channel: context 60, reference 200; edge pixel gets alpha 1/4
        assert_eq!(out.get_pixel(4, 10)[2], 95);
        assert_eq!(out.get_pixel(7, 10)[2], 200);
    }

    #[test]
    fn feature_shape_validation() {
        assert!(CoarseFeature::zeros(257, 1536).validate().is_ok());
        assert!(matches!(
            CoarseFeature::zeros(256, 1536).validate(),
            Err(CompositeError::FeatureShape { rows: 256, cols: 1536 })
        ));
        assert!(CoarseFeature::new(2, 2, vec![0.0; 3]).is_err());
        let mut f = CoarseFeature::zeros(257, 1536);
        f.data[7] = f32::NAN;
        assert!(f.validate().is_err());
    }

    #[test]
    fn request_serializes_nested_feature_rows() {
        let (ctx, r, p) = scene();
        let stitch = filtering::build_stitch_with(&r, &p, geometry::AffineOp::Identity).unwrap();
        let bundle =
            ConditioningBundle::new(&ctx, &r, &p, stitch, Some(CoarseFeature::zeros(257, 1536))).unwrap();
        let req = IntegrateRequest::from_bundle(&bundle, 50, 1);
        let rows = req.coarse_feature.as_ref().unwrap();
        assert_eq!(rows.len(), 257);
        assert!(rows.iter().all(|r| r.len() == 1536));
        let json = serde_json::to_value(&req).unwrap();
        for key in ["context", "mask", "stitch", "reference", "coarse_feature", "steps", "seed"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let mask = decode_png(&req.mask).unwrap().to_luma8();
        assert_eq!(mask.get_pixel(4, 4)[0], 255);
        assert_eq!(mask.get_pixel(3, 4)[0], 0);
        assert_eq!(bundle.region_mask.to_visible(), mask);
    }
}
