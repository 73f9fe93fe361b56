//! Injecting reference instances into context scenes.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use image::RgbImage;
use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::voc::{annotation_xml, ANNOTATIONS_DIR, IMAGES_DIR, MANIFEST_FILE};
use super::{io_err, AnnotationRecord, DatasetError, DatasetManifest, ImageRecord, Result};
use crate::compositing::{Backend, Compositor};
use crate::geometry::orient_align;
use crate::seed;
use crate::types::{iou, BBox, ContextScene, LabelSpace, PlacementSpec, ReferenceInstance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementPolicy {
    /// Bounds of the factor applied to the reference's source area.
    pub scale_range: (f64, f64),
    /// Maximum IoU with any existing or already-placed box.
    pub overlap_threshold: f64,
    pub max_attempts: u32,
}

impl Default for PlacementPolicy {
    fn default() -> Self {
        Self {
            scale_range: (0.7, 1.3),
            overlap_threshold: 0.1,
            max_attempts: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextPlan {
    pub context_id: String,
    /// `(novel class, count)` pairs placed into this context, in order.
    pub items: Vec<(String, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisPlan {
    pub contexts: Vec<ContextPlan>,
    pub backend: Backend,
    pub policy: PlacementPolicy,
    pub seed: u64,
    pub require_novel_free: bool,
}

impl SynthesisPlan {
    /// Every context receives `per_class` instances of every class.
    pub fn uniform<S: AsRef<str>>(
        context_ids: &[String],
        classes: &[S],
        per_class: u32,
        backend: Backend,
        seed: u64,
    ) -> Self {
        let items: Vec<(String, u32)> = classes
            .iter()
            .map(|c| (c.as_ref().to_owned(), per_class))
            .collect();
        Self {
            contexts: context_ids
                .iter()
                .map(|id| ContextPlan {
                    context_id: id.clone(),
                    items: items.clone(),
                })
                .collect(),
            backend,
            policy: PlacementPolicy::default(),
            seed,
            require_novel_free: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.policy;
        if !(0.0..1.0).contains(&p.overlap_threshold) {
            return Err(DatasetError::InvalidPlan(format!(
                "overlap threshold {} not in [0, 1)",
                p.overlap_threshold
            )));
        }
        let (lo, hi) = p.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(DatasetError::InvalidPlan(format!("scale range ({lo}, {hi})")));
        }
        if p.max_attempts == 0 {
            return Err(DatasetError::InvalidPlan("max_attempts must be >= 1".into()));
        }
        if let Some(c) = self
            .contexts
            .iter()
            .find(|c| c.items.iter().any(|(_, n)| *n == 0))
        {
            return Err(DatasetError::InvalidPlan(format!(
                "zero count planned for {}",
                c.context_id
            )));
        }
        Ok(())
    }

    pub fn planned(&self) -> usize {
        self.contexts
            .iter()
            .flat_map(|c| &c.items)
            .map(|(_, n)| *n as usize)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub context_id: String,
    pub class: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub id: String,
    pub context_id: String,
    pub pixels: RgbImage,
    pub boxes: Vec<(BBox, String)>,
    /// Reference source ids in placement order.
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisOutput {
    pub images: Vec<SyntheticImage>,
    pub skipped: Vec<SkipRecord>,
    pub labels: LabelSpace,
    pub seed: u64,
}

impl SynthesisOutput {
    pub fn placed(&self) -> usize {
        self.images.iter().map(|i| i.boxes.len()).sum()
    }

    pub fn placed_per_class(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (_, c) in self.images.iter().flat_map(|i| &i.boxes) {
            *out.entry(c.clone()).or_default() += 1;
        }
        out
    }

    pub fn skipped_per_class(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for s in &self.skipped {
            *out.entry(s.class.clone()).or_default() += 1;
        }
        out
    }

    /// Manifest describing the synthetic images as PNGs under `root`.
    pub fn manifest(&self, root: &Path) -> DatasetManifest {
        let mut m = DatasetManifest::empty(root, self.labels.clone());
        m.seed = self.seed;
        for img in &self.images {
            let (width, height) = img.pixels.dimensions();
            m.images.push(ImageRecord {
                id: img.id.clone(),
                file: Path::new(IMAGES_DIR).join(format!("{}.png", img.id)),
                width,
                height,
            });
            for (k, (bbox, class)) in img.boxes.iter().enumerate() {
                m.annotations.push(AnnotationRecord {
                    id: format!("{}#{k}", img.id),
                    image_id: img.id.clone(),
                    bbox: *bbox,
                    class: class.clone(),
                    difficult: false,
                });
            }
        }
        m
    }

    /// Writes PNGs, VOC XML and `manifest.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        let m = self.manifest(dir);
        let ann_dir = dir.join(ANNOTATIONS_DIR);
        let img_dir = dir.join(IMAGES_DIR);
        fs::create_dir_all(&ann_dir).map_err(io_err(&ann_dir))?;
        fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
        self.images
            .par_iter()
            .zip(m.images.par_iter())
            .try_for_each(|(img, rec)| -> Result<()> {
                let path = dir.join(&rec.file);
                img.pixels
                    .save_with_format(&path, image::ImageFormat::Png)
                    .map_err(|source| DatasetError::Image { path, source })?;
                let objects: Vec<&AnnotationRecord> =
                    m.annotations.iter().filter(|a| a.image_id == rec.id).collect();
                let xml = ann_dir.join(format!("{}.xml", rec.id));
                fs::write(&xml, annotation_xml(rec, &objects)).map_err(io_err(&xml))
            })?;
        m.save_json(&dir.join(MANIFEST_FILE))?;
        Ok(m)
    }
}

/// Samples a box for `reference`: area is the reference area times a factor
/// from the policy's scale range, orientation is kept or transposed with
/// equal odds, and the position is uniform. `None` when it cannot fit.
fn sample_box(
    rng: &mut impl Rng,
    reference: &ReferenceInstance,
    policy: &PlacementPolicy,
    width: u32,
    height: u32,
    margin: u32,
) -> Option<BBox> {
    let (rw, rh) = reference.dimensions();
    let factor = rng.random_range(policy.scale_range.0..=policy.scale_range.1);
    let area = f64::from(rw) * f64::from(rh) * factor;
    let mut ratio = f64::from(rw) / f64::from(rh);
    if rng.random_bool(0.5) {
        ratio = 1.0 / ratio;
    }
    let bw = ((area * ratio).sqrt().round() as u32).max(1);
    let bh = ((area / ratio).sqrt().round() as u32).max(1);
    if bw + 2 * margin > width || bh + 2 * margin > height {
        return None;
    }
    let x = rng.random_range(margin..=width - margin - bw);
    let y = rng.random_range(margin..=height - margin - bh);
    BBox::new(
        f64::from(x),
        f64::from(y),
        f64::from(x + bw),
        f64::from(y + bh),
    )
    .ok()
}

struct ItemOutcome {
    image: Option<SyntheticImage>,
    skipped: Vec<SkipRecord>,
}

fn synthesize_item(
    index: usize,
    syn_index: usize,
    plan_item: &ContextPlan,
    context: &ContextScene,
    references: &HashMap<&str, Vec<&ReferenceInstance>>,
    plan: &SynthesisPlan,
    compositor: &dyn Compositor,
) -> Result<ItemOutcome> {
    let item_seed = seed::derive_seed(plan.seed, &["synth", &context.id, &index.to_string()]);
    let mut rng = seed::rng_from(item_seed, &["placement"]);
    let (w, h) = context.dimensions();
    let margin = compositor.border_margin();
    let existing: Vec<BBox> = context.existing_boxes().iter().map(|(b, _)| *b).collect();
    let mut current = context.clone();
    let mut boxes: Vec<(BBox, String)> = Vec::new();
    let mut sources = Vec::new();
    let mut skipped = Vec::new();
    let mut serial = 0u64;

    for (class, count) in &plan_item.items {
        let pool = references
            .get(class.as_str())
            .ok_or_else(|| DatasetError::MissingReferences(class.clone()))?;
        for _ in 0..*count {
            let mut accepted = None;
            for _ in 0..plan.policy.max_attempts {
                let reference = pool[rng.random_range(0..pool.len())];
                let Some(bbox) = sample_box(&mut rng, reference, &plan.policy, w, h, margin) else {
                    continue;
                };
                let clear = existing
                    .iter()
                    .chain(boxes.iter().map(|(b, _)| b))
                    .all(|other| iou(&bbox, other) <= plan.policy.overlap_threshold);
                if clear {
                    accepted = Some((reference, bbox));
                    break;
                }
            }
            let Some((reference, bbox)) = accepted else {
                info!(
                    "skipping {class} in {} after {} attempts",
                    context.id, plan.policy.max_attempts
                );
                skipped.push(SkipRecord {
                    context_id: context.id.clone(),
                    class: class.clone(),
                    attempts: plan.policy.max_attempts,
                });
                continue;
            };
            let placement = PlacementSpec::new(bbox, w, h)?;
            let (aligned, _) = orient_align(reference, &placement);
            let compose_seed = seed::derive_seed(item_seed, &["compose", &serial.to_string()]);
            serial += 1;
            let result = compositor.compose(&current, &aligned, &placement, compose_seed)?;
            current = current.with_pixels(result.pixels);
            boxes.push((result.new_box, class.clone()));
            sources.push(reference.source.image_id.clone());
        }
    }
    let image = (!boxes.is_empty()).then(|| SyntheticImage {
        id: format!("{}__syn{syn_index}", context.id),
        context_id: context.id.clone(),
        pixels: current.pixels().clone(),
        boxes,
        sources,
    });
    Ok(ItemOutcome { image, skipped })
}

/// Runs the plan. Items are processed in parallel, each from its own
/// sub-seed of `hash(plan.seed, context id, item index)`, so output does not
/// depend on scheduling.
pub fn synthesize(
    references: &[ReferenceInstance],
    contexts: &[ContextScene],
    labels: &LabelSpace,
    plan: &SynthesisPlan,
    compositor: &dyn Compositor,
) -> Result<SynthesisOutput> {
    plan.validate()?;
    if plan.backend != compositor.backend() {
        return Err(DatasetError::InvalidPlan(format!(
            "plan wants {} but compositor is {}",
            plan.backend,
            compositor.backend()
        )));
    }
    let by_id: HashMap<&str, &ContextScene> = contexts.iter().map(|c| (c.id.as_str(), c)).collect();
    let mut refs: HashMap<&str, Vec<&ReferenceInstance>> = HashMap::new();
    for r in references {
        refs.entry(r.label.name.as_str()).or_default().push(r);
    }
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut jobs = Vec::with_capacity(plan.contexts.len());
    for (index, item) in plan.contexts.iter().enumerate() {
        let ctx = *by_id
            .get(item.context_id.as_str())
            .ok_or_else(|| DatasetError::UnknownContext(item.context_id.clone()))?;
        if plan.require_novel_free && !ctx.is_novel_free() {
            return Err(DatasetError::NotNovelFree(ctx.id.clone()));
        }
        let n = seen.entry(item.context_id.as_str()).or_default();
        jobs.push((index, *n, item, ctx));
        *n += 1;
    }

    let outcomes: Vec<ItemOutcome> = jobs
        .par_iter()
        .map(|&(index, n, item, ctx)| synthesize_item(index, n, item, ctx, &refs, plan, compositor))
        .collect::<Result<_>>()?;

    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        images.extend(o.image);
        skipped.extend(o.skipped);
    }
    if images.is_empty() {
        return Err(DatasetError::EmptySynthesis);
    }
    if !skipped.is_empty() {
        warn!("{} of {} planned placements skipped", skipped.len(), plan.planned());
    }
    Ok(SynthesisOutput {
        images,
        skipped,
        labels: labels.clone(),
        seed: plan.seed,
    })
}
