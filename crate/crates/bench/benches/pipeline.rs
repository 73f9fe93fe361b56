use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ctxforge::compositing::{PoissonParams, PoissonProblem};
use ctxforge::dataset::{AnnotationRecord, ImageRecord};
use ctxforge::evaluation::{evaluate, EvalOptions};
use ctxforge::filtering::{build_stitch, high_pass};
use ctxforge::geometry::pad_then_resize;
use ctxforge::{
    AffineFamily, BBox, ClassLabel, ContextScene, DatasetManifest, Detection, LabelSpace, Mask, PlacementSpec,
    ReferenceInstance, SourceRef,
};
use image::{Rgb, RgbImage};

fn reference(w: u32, h: u32) -> ReferenceInstance {
    ReferenceInstance::new(
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7) as u8, (y * 5) as u8, ((x ^ y) * 3) as u8])),
        Mask::from_fn(w, h, |x, y| x > 1 && y > 1 && x + 2 < w && y + 2 < h),
        ClassLabel::novel("airplane"),
        SourceRef {
            image_id: "src".into(),
            bbox: BBox::new(0.0, 0.0, f64::from(w), f64::from(h)).unwrap(),
        },
    )
    .unwrap()
}

fn context() -> ContextScene {
    let px = RgbImage::from_fn(256, 256, |x, y| Rgb([(x % 97) as u8 + 60, (y % 89) as u8 + 40, 120]));
    ContextScene::new("ctx", px, vec![], true).unwrap()
}

fn filtering(c: &mut Criterion) {
    let r = reference(96, 64);
    let ctx = context();
    let p = PlacementSpec::in_context(BBox::new(40.0, 40.0, 136.0, 104.0).unwrap(), &ctx).unwrap();
    c.bench_function("high_pass 96x64", |b| b.iter(|| high_pass(black_box(r.pixels())).unwrap()));
    c.bench_function("build_stitch 96x64", |b| {
        b.iter(|| build_stitch(black_box(&r), &p, &AffineFamily::default(), 7).unwrap())
    });
    c.bench_function("pad_then_resize 96x64", |b| b.iter(|| pad_then_resize(black_box(&r)).unwrap()));
}

fn poisson(c: &mut Criterion) {
    let ctx = context();
    let r = reference(64, 48);
    let p = PlacementSpec::in_context(BBox::new(50.0, 60.0, 114.0, 108.0).unwrap(), &ctx).unwrap();
    let problem = PoissonProblem::new(&ctx, &r, &p).unwrap();
    c.bench_function("poisson assemble 64x48", |b| b.iter(|| PoissonProblem::new(&ctx, black_box(&r), &p).unwrap()));
    c.bench_function("poisson solve 64x48", |b| b.iter(|| problem.solve(&PoissonParams::default())));
}

fn eval(c: &mut Criterion) {
    let labels = LabelSpace::new(["ship"], ["airplane", "windmill"]).unwrap();
    let mut m = DatasetManifest::empty("/gt", labels);
    let mut dets = Vec::new();
    for i in 0..500u32 {
        let id = format!("img{i:04}");
        m.images.push(ImageRecord {
            id: id.clone(),
            file: format!("{id}.png").into(),
            width: 256,
            height: 256,
        });
        for k in 0..4u32 {
            let class = if k % 2 == 0 { "airplane" } else { "windmill" };
            let x = f64::from(k * 50 + i % 7);
            let gt = BBox::new(x, 10.0, x + 40.0, 50.0).unwrap();
            m.annotations.push(AnnotationRecord {
                id: format!("{id}#{k}"),
                image_id: id.clone(),
                bbox: gt,
                class: class.into(),
                difficult: false,
            });
            let jitter = f64::from((i * 31 + k * 17) % 13);
            let conf = f64::from((i * 7919 + k * 104_729) % 1000) / 1000.0;
            let bbox = BBox::new(x + jitter, 10.0, x + 40.0 + jitter, 50.0).unwrap();
            dets.push(Detection::new(id.clone(), bbox, class, conf).unwrap());
        }
    }
    c.bench_function("evaluate 500 images x 4 boxes", |b| {
        b.iter(|| evaluate(black_box(&m), black_box(&dets), &EvalOptions::default()).unwrap())
    });
}

criterion_group!(benches, filtering, poisson, eval);
criterion_main!(benches);
