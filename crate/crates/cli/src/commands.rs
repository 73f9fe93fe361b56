use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use ctxforge::compositing::{
    ClientConfig, DiffusionCompositor, IntegrationClient, NaiveCompositor, PoissonCompositor,
};
use ctxforge::dataset::{
    self, coco, extract_references, merge, sample_kshot, synthesize, PlacementPolicy,
    SynthesisPlan, VocOptions,
};
use ctxforge::evaluation::{self, ApMetric, EvalOptions, EvalReport};
use ctxforge::filtering::build_stitch;
use ctxforge::geometry::orient_align;
use ctxforge::harness::{self, SweepSpec};
use ctxforge::seed::rng_from;
use ctxforge::{AffineFamily, Backend, Compositor, DatasetManifest, LabelSpace, PlacementSpec};
use image::{Rgb, RgbImage};
use log::info;
use rand::seq::SliceRandom;

use crate::config::RunConfig;
use crate::error::CliError;

fn labels(cfg: &RunConfig) -> LabelSpace {
    LabelSpace::from_all(&cfg.classes, &cfg.novel)
}

/// A `manifest.json` file, a directory holding one, or a VOC directory.
fn load_dataset(path: &Path, cfg: &RunConfig) -> Result<DatasetManifest, CliError> {
    let manifest = if path.is_file() {
        Some(path.to_path_buf())
    } else {
        Some(path.join(dataset::voc::MANIFEST_FILE)).filter(|p| p.is_file())
    };
    let m = match manifest {
        Some(p) => {
            let mut m = DatasetManifest::load_json(&p)?;
            // the split comes from the run, not from whoever wrote the file
            m.labels = relabel(&m.labels, cfg);
            m
        }
        None => {
            let mut opts = VocOptions::new(labels(cfg));
            opts.class_map = cfg.class_map.clone();
            dataset::load_voc(path, &opts)?
        }
    };
    info!("{}: {} images, {} boxes", path.display(), m.images.len(), m.annotations.len());
    Ok(m)
}

fn relabel(stored: &LabelSpace, cfg: &RunConfig) -> LabelSpace {
    let all: Vec<String> = stored
        .labels()
        .into_iter()
        .map(|l| l.name)
        .chain(cfg.classes.iter().cloned())
        .collect();
    LabelSpace::from_all(&all, &cfg.novel)
}

fn compositor(cfg: &RunConfig) -> Box<dyn Compositor> {
    match cfg.backend {
        Backend::Naive => Box::new(NaiveCompositor),
        Backend::Poisson => Box::new(PoissonCompositor::default()),
        Backend::Diffusion => {
            let cc = ClientConfig {
                timeout: Duration::from_secs(cfg.timeout_secs),
                retries: cfg.retries,
                max_in_flight: cfg.max_in_flight,
                steps: cfg.steps,
            };
            let client = match (&cfg.endpoint, cfg.mock) {
                (_, true) => IntegrationClient::mock(cc),
                (Some(ep), false) => IntegrationClient::http(ep.clone(), cc),
                (None, false) => unreachable!("rejected during config resolution"),
            };
            Box::new(DiffusionCompositor::new(client))
        }
    }
}

fn policy(cfg: &RunConfig) -> PlacementPolicy {
    PlacementPolicy {
        scale_range: (cfg.scale_min, cfg.scale_max),
        overlap_threshold: cfg.overlap_threshold,
        max_attempts: cfg.max_attempts,
    }
}

fn prepare_out(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out)
        .map_err(|e| CliError::Data(format!("{}: {e}", cfg.out.display())))?;
    let p = cfg.out.join("config.resolved.toml");
    fs::write(&p, cfg.to_toml()).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
}

/// Seeded choice of `n` novel-free contexts (all when `n` is 0).
fn pick_contexts(m: &DatasetManifest, n: usize, seed: u64) -> Result<Vec<String>, CliError> {
    let mut ids = m.novel_free_image_ids();
    if ids.is_empty() {
        return Err(CliError::Data("dataset has no novel-free context images".into()));
    }
    if n > ids.len() {
        return Err(CliError::Data(format!("{n} contexts requested, {} available", ids.len())));
    }
    if n > 0 {
        ids.shuffle(&mut rng_from(seed, &["cli", "contexts"]));
        ids.truncate(n);
        ids.sort();
    }
    Ok(ids)
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let root = cfg.require_root()?;
    let comp = compositor(cfg);
    let full = load_dataset(root, cfg)?;
    let sampled = sample_kshot(&full, &cfg.novel, cfg.k, cfg.seed)?;
    let refs = extract_references(&sampled)?;
    let context_ids = pick_contexts(&full, cfg.contexts, cfg.seed)?;
    let contexts = full.load_contexts(&context_ids)?;
    let plan = SynthesisPlan {
        policy: policy(cfg),
        ..SynthesisPlan::uniform(&context_ids, &cfg.novel, cfg.per_context, cfg.backend, cfg.seed)
    };
    prepare_out(cfg)?;
    let output = synthesize(&refs, &contexts, &full.labels, &plan, comp.as_ref())?;
    let out = std::path::absolute(&cfg.out).map_err(|e| CliError::Data(e.to_string()))?;
    let synthetic = output.write(&out)?;
    let merged = merge(&sampled.fewshot_subset()?, &synthetic)?;
    let saved = dataset::save_voc(&merged, &out)?;
    coco::write_coco(&saved, &out.join("annotations.coco.json"))?;

    let placed = output.placed_per_class();
    let skipped = output.skipped_per_class();
    println!("{:<16} {:>6} {:>7} {:>7}", "class", "shots", "placed", "skipped");
    for class in &cfg.novel {
        println!(
            "{:<16} {:>6} {:>7} {:>7}",
            class,
            cfg.k,
            placed.get(class).unwrap_or(&0),
            skipped.get(class).unwrap_or(&0)
        );
    }
    println!(
        "{} synthetic images, {} images total, written to {}",
        output.images.len(),
        saved.images.len(),
        out.display()
    );
    Ok(())
}

pub fn sweep(cfg: &RunConfig) -> Result<(), CliError> {
    let root = cfg.require_root()?;
    let comp = compositor(cfg);
    let max_i = cfg.sweep_instances.iter().copied().max().unwrap_or(0);
    let full = load_dataset(root, cfg)?;
    let sampled = sample_kshot(&full, &cfg.novel, cfg.k.max(max_i), cfg.seed)?;
    let spec = SweepSpec {
        instance_counts: cfg.sweep_instances.clone(),
        context_counts: cfg.sweep_contexts.clone(),
        backend: cfg.backend,
        seed: cfg.seed,
        per_context: cfg.per_context,
        policy: policy(cfg),
        detector_command: cfg.detector_command.clone(),
        eval_manifest: cfg.eval_manifest.clone(),
        detector_jobs: cfg.detector_jobs,
        output_dir: cfg.out.clone(),
    };
    spec.validate()?;
    prepare_out(cfg)?;
    let result = harness::run_sweep(&sampled, &spec, comp.as_ref())?;
    println!("{:>9} {:>8} {:>7} {:>7} {:>8}", "instances", "contexts", "placed", "skipped", "mAP(%)");
    for c in &result.cells {
        let map = match (c.map, &c.detector_error) {
            (Some(m), _) => format!("{:.2}", m * 100.0),
            (None, Some(_)) => "failed".into(),
            (None, None) => "-".into(),
        };
        println!("{:>9} {:>8} {:>7} {:>7} {:>8}", c.instances, c.contexts, c.placed, c.skipped, map);
    }
    if result.cells.iter().any(|c| c.map.is_some()) {
        let files = harness::emit_curves(&result, &cfg.out.join("curves"))?;
        println!("{} curves written to {}", files.len(), cfg.out.join("curves").display());
    }
    Ok(())
}

pub struct EvalRequest<'a> {
    pub gt: &'a Path,
    pub detections: &'a Path,
    pub all_classes: bool,
    pub iou: f64,
    pub metric: &'a str,
    pub baseline: Option<&'a Path>,
    pub name: &'a str,
    pub out: Option<&'a Path>,
}

pub fn eval(cfg: &RunConfig, req: &EvalRequest<'_>) -> Result<(), CliError> {
    let metric: ApMetric = req.metric.parse().map_err(CliError::Config)?;
    let options = EvalOptions {
        iou_threshold: req.iou,
        metric,
        classes: (!req.all_classes).then(|| cfg.novel.clone()),
    };
    if !(req.iou > 0.0 && req.iou <= 1.0) {
        return Err(CliError::Config(format!("--iou {} not in (0, 1]", req.iou)));
    }
    let baseline = req.baseline.map(EvalReport::load_json).transpose()?;
    let gt = load_dataset(req.gt, cfg)?;
    let dets = if req.detections.is_dir() {
        let classes: Vec<String> = gt.labels.labels().into_iter().map(|l| l.name).collect();
        evaluation::read_voc_results_dir(req.detections, &classes)?
    } else {
        evaluation::read_coco_results(req.detections, &gt)?
    };
    let report = evaluation::evaluate(&gt, &dets, &options)?;
    let mut rows: Vec<(&str, &EvalReport)> = Vec::new();
    if let Some(b) = &baseline {
        rows.push(("baseline", b));
    }
    rows.push((req.name, &report));
    print!("{}", evaluation::format_table(&rows, baseline.as_ref()));
    if let Some(b) = &baseline {
        let delta = evaluation::delta_report(b, &report)?;
        print!("\nΔ vs baseline (points)\n{delta}");
    }
    println!("metric: {metric}, IoU {}", report.iou_threshold);
    if let Some(out) = req.out {
        report.save_json(out)?;
    }
    Ok(())
}

fn draw_box(img: &mut RgbImage, b: &ctxforge::BBox, color: Rgb<u8>) {
    let (w, h) = img.dimensions();
    let x0 = (b.x_min().floor().max(0.0) as u32).min(w - 1);
    let y0 = (b.y_min().floor().max(0.0) as u32).min(h - 1);
    let x1 = (b.x_max().ceil() as u32).clamp(1, w) - 1;
    let y1 = (b.y_max().ceil() as u32).clamp(1, h) - 1;
    for x in x0..=x1 {
        img.put_pixel(x, y0, color);
        img.put_pixel(x, y1, color);
    }
    for y in y0..=y1 {
        img.put_pixel(x0, y, color);
        img.put_pixel(x1, y, color);
    }
}

pub fn preview(cfg: &RunConfig) -> Result<(), CliError> {
    let root = cfg.require_root()?;
    let comp = compositor(cfg);
    let full = load_dataset(root, cfg)?;
    let sampled = sample_kshot(&full, &cfg.novel, cfg.k, cfg.seed)?;
    let refs = extract_references(&sampled)?;
    let available = full.novel_free_image_ids().len();
    let context_ids = pick_contexts(&full, cfg.preview_count.clamp(1, available.max(1)), cfg.seed)?;
    let contexts = full.load_contexts(&context_ids)?;
    let plan = SynthesisPlan {
        contexts: context_ids
            .iter()
            .enumerate()
            .map(|(n, id)| dataset::ContextPlan {
                context_id: id.clone(),
                items: vec![(cfg.novel[n % cfg.novel.len()].clone(), 1)],
            })
            .collect(),
        policy: PlacementPolicy {
            max_attempts: cfg.max_attempts,
            ..policy(cfg)
        },
        ..SynthesisPlan::uniform(&[], &cfg.novel, 1, cfg.backend, cfg.seed)
    };
    prepare_out(cfg)?;
    let output = synthesize(&refs, &contexts, &full.labels, &plan, comp.as_ref())?;
    let by_source: BTreeMap<&str, Vec<&ctxforge::ReferenceInstance>> =
        refs.iter().fold(BTreeMap::new(), |mut m, r| {
            m.entry(r.source.image_id.as_str()).or_default().push(r);
            m
        });
    let family = AffineFamily::default();
    let mut written: Vec<PathBuf> = Vec::new();
    for img in &output.images {
        let (w, h) = img.pixels.dimensions();
        let mut sheet = RgbImage::new(w * 2, h);
        let mut composite = img.pixels.clone();
        for (b, _) in &img.boxes {
            draw_box(&mut composite, b, Rgb([255, 40, 40]));
        }
        image::imageops::replace(&mut sheet, &composite, 0, 0);
        let (b, class) = &img.boxes[0];
        let reference = by_source[img.sources[0].as_str()]
            .iter()
            .find(|r| &r.label.name == class)
            .expect("source belongs to a reference of this class");
        let placement = PlacementSpec::new(*b, w, h).map_err(|e| CliError::Data(e.to_string()))?;
        let (aligned, _) = orient_align(reference, &placement);
        let (stitch, _) =
            build_stitch(&aligned, &placement, &family, cfg.seed).map_err(|e| CliError::Data(e.to_string()))?;
        let gray = image::DynamicImage::ImageLuma8(stitch.to_gray()).to_rgb8();
        image::imageops::replace(&mut sheet, &gray, i64::from(w), 0);
        let path = cfg.out.join(format!("preview_{}.png", img.id));
        sheet
            .save(&path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        written.push(path);
    }
    println!("{} contact sheets written to {}", written.len(), cfg.out.display());
    Ok(())
}
