mod support;

use std::time::{Duration, Instant};

use ctxforge::compositing::diffusion::{
    ClientConfig, CoarseFeature, ConditioningBundle, IntegrationClient, FEATURE_COLS, FEATURE_ROWS,
};
use ctxforge::compositing::{compose_diffusion, CompositeError, DiffusionCompositor};
use ctxforge::filtering::build_stitch;
use ctxforge::{AffineFamily, BBox, ClassLabel, Compositor, ContextScene, Mask, PlacementSpec, ReferenceInstance, SourceRef};
use image::{Rgb, RgbImage};
use support::{StubMode, StubServer};

fn scene() -> (ContextScene, ReferenceInstance, PlacementSpec) {
    let ctx = ContextScene::new("c", RgbImage::from_fn(48, 40, |x, y| Rgb([(x * 5) as u8, (y * 6) as u8, 90])), vec![], true).unwrap();
    let r = ReferenceInstance::new(
        RgbImage::from_fn(12, 8, |x, _| Rgb([250, (x * 20) as u8, 10])),
        Mask::full(12, 8),
        ClassLabel::novel("airplane"),
        SourceRef {
            image_id: "src".into(),
            bbox: BBox::new(0.0, 0.0, 12.0, 8.0).unwrap(),
        },
    )
    .unwrap();
    let p = PlacementSpec::in_context(BBox::new(10.0, 12.0, 34.0, 28.0).unwrap(), &ctx).unwrap();
    (ctx, r, p)
}

fn bundle(feature: Option<CoarseFeature>) -> (ConditioningBundle, PlacementSpec) {
    let (ctx, r, p) = scene();
    let (stitch, _) = build_stitch(&r, &p, &AffineFamily::default(), 1).unwrap();
    (ConditioningBundle::new(&ctx, &r, &p, stitch, None).map(|mut b| {
        b.coarse_feature = feature;
        b
    }).unwrap(), p)
}

fn config(timeout_ms: u64) -> ClientConfig {
    ClientConfig {
        timeout: Duration::from_millis(timeout_ms),
        retries: 2,
        max_in_flight: 4,
        steps: 4,
    }
}

#[test]
fn round_trip_through_http_matches_in_process_mock() {
    let server = StubServer::start(StubMode::Mock);
    let (b, p) = bundle(None);
    let http = IntegrationClient::http(server.url.clone(), config(5000));
    let a = compose_diffusion(&http, &b, &p, 3).unwrap();
    let local = compose_diffusion(&IntegrationClient::mock(config(5000)), &b, &p, 3).unwrap();
    assert_eq!(a.pixels, local.pixels);
    assert_eq!(a.pixels.dimensions(), (48, 40));
    assert_ne!(a.pixels, b.context_pixels);
    assert_eq!(server.hits(), 1);
}

#[test]
fn full_shape_feature_is_accepted() {
    let server = StubServer::start(StubMode::Mock);
    let (b, _) = bundle(Some(CoarseFeature::zeros(FEATURE_ROWS, FEATURE_COLS)));
    let client = IntegrationClient::http(server.url.clone(), config(10_000));
    client.integrate(&b, 0).unwrap();
    assert_eq!(server.hits(), 1);
}

#[test]
fn wrong_feature_shape_never_reaches_the_wire() {
    let server = StubServer::start(StubMode::Mock);
    let (b, _) = bundle(Some(CoarseFeature::zeros(FEATURE_ROWS, FEATURE_COLS - 1)));
    let client = IntegrationClient::http(server.url.clone(), config(5000));
    let err = client.integrate(&b, 0).unwrap_err();
    assert!(matches!(err, CompositeError::FeatureShape { rows: 257, cols: 1535 }), "{err}");
    assert_eq!(server.hits(), 0);
}

#[test]
fn timeouts_are_retried_then_reported() {
    let server = StubServer::start(StubMode::Stall);
    let (b, _) = bundle(None);
    let client = IntegrationClient::http(server.url.clone(), config(200));
    let started = Instant::now();
    let err = client.integrate(&b, 0).unwrap_err();
    assert!(matches!(err, CompositeError::Timeout { attempts: 3 }), "{err}");
    assert!(err.is_service());
    assert_eq!(server.hits(), 3);
    assert!(started.elapsed() < Duration::from_secs(3));
}

#[test]
fn a_retry_can_succeed() {
    let server = StubServer::start(StubMode::StallFirst(2));
    let (b, _) = bundle(None);
    let client = IntegrationClient::http(server.url.clone(), config(300));
    client.integrate(&b, 0).unwrap();
    assert_eq!(server.hits(), 3);
}

#[test]
fn wrong_size_response_rejected() {
    let server = StubServer::start(StubMode::WrongSize);
    let (b, _) = bundle(None);
    let client = IntegrationClient::http(server.url.clone(), config(5000));
    let err = client.integrate(&b, 0).unwrap_err();
    assert!(
        matches!(err, CompositeError::DimensionMismatch { expected_width: 48, expected_height: 40, got_width: 47, got_height: 40 }),
        "{err}"
    );
}

#[test]
fn server_side_shape_error_is_a_protocol_error() {
    // a client that skips local validation still gets a 400 naming the field
    use ctxforge::compositing::diffusion::{HttpTransport, IntegrateRequest, Transport, TransportError};
    let server = StubServer::start(StubMode::Mock);
    let (b, _) = bundle(None);
    let mut req = IntegrateRequest::from_bundle(&b, 1, 0);
    req.coarse_feature = Some(vec![vec![0.0; 1535]; 257]);
    let err = HttpTransport::new(server.url.clone()).integrate(&req, Duration::from_secs(5)).unwrap_err();
    match err {
        TransportError::Status { code: 400, body } => assert!(body.contains("coarse_feature"), "{body}"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn unreachable_service_is_a_transport_error() {
    let client = IntegrationClient::http("http://127.0.0.1:9", config(1000));
    let (b, _) = bundle(None);
    let err = client.integrate(&b, 0).unwrap_err();
    assert!(err.is_service(), "{err}");
}

#[test]
fn compositor_over_http_is_deterministic() {
    let server = StubServer::start(StubMode::Mock);
    let (ctx, r, p) = scene();
    let comp = DiffusionCompositor::new(IntegrationClient::http(server.url.clone(), config(5000)));
    let a = comp.compose(&ctx, &r, &p, 11).unwrap();
    let b = comp.compose(&ctx, &r, &p, 11).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.new_box, p.target());
}
