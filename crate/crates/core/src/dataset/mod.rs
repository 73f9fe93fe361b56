//! Detection dataset bookkeeping: manifests, VOC/COCO I/O, K-shot sampling,
//! reference extraction, synthesis and merging.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compositing::CompositeError;
use crate::seed;
use crate::types::{BBox, ClassLabel, ContextScene, LabelSpace, Mask, ReferenceInstance, SourceRef, TypeError};

pub mod coco;
pub mod synth;
pub mod voc;

pub use synth::{synthesize, ContextPlan, PlacementPolicy, SkipRecord, SynthesisOutput, SynthesisPlan, SyntheticImage};
pub use voc::{load_voc, save_voc, VocOptions};

pub const MANIFEST_SCHEMA: &str = "ctxforge-manifest/1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: malformed XML: {message}")]
    Xml { file: PathBuf, message: String },
    #[error("{file}: image {image} not found")]
    MissingImage { file: PathBuf, image: PathBuf },
    #[error("{file}: invalid box: {source}")]
    InvalidBox {
        file: PathBuf,
        #[source]
        source: TypeError,
    },
    #[error("{file}: box {bbox} exceeds the {width}x{height} image")]
    BoxOutOfBounds {
        file: PathBuf,
        bbox: BBox,
        width: u32,
        height: u32,
    },
    #[error("{file}: unknown class {name:?}")]
    UnknownClass { file: PathBuf, name: String },
    #[error("annotation {annotation} references missing image {image}")]
    DanglingAnnotation { annotation: String, image: String },
    #[error("class {class} has {available} usable instances, {k} requested")]
    NotEnoughInstances { class: String, available: usize, k: usize },
    #[error("class {0} is not a novel class of this dataset")]
    NotNovel(String),
    #[error("manifest has no K-shot selection")]
    NoKShot,
    #[error("invalid K-shot selection: {0}")]
    InvalidKShot(String),
    #[error("annotation {0} crops to an empty region")]
    DegenerateCrop(String),
    #[error("id {0} exists in both datasets")]
    IdCollision(String),
    #[error("class {0} is base in one dataset and novel in the other")]
    SplitConflict(String),
    #[error("synthesis produced no placements")]
    EmptySynthesis,
    #[error("invalid synthesis plan: {0}")]
    InvalidPlan(String),
    #[error("unknown context {0}")]
    UnknownContext(String),
    #[error("context {0} is not novel-free")]
    NotNovelFree(String),
    #[error("no reference instances of class {0}")]
    MissingReferences(String),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Composite(#[from] CompositeError),
    #[error(transparent)]
    Type(#[from] TypeError),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Relative to the manifest root unless absolute.
    pub file: PathBuf,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub image_id: String,
    pub bbox: BBox,
    pub class: String,
    #[serde(default)]
    pub difficult: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KShotSelection {
    pub k: usize,
    /// Selected annotation ids per novel class, sorted.
    pub selected: BTreeMap<String, Vec<String>>,
}

impl KShotSelection {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.selected.values().flatten().map(String::as_str)
    }

    pub fn total(&self) -> usize {
        self.selected.values().map(Vec::len).sum()
    }
}

/// A detection dataset listing: images, box annotations, the label split
/// and an optional K-shot selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: String,
    pub root: PathBuf,
    pub seed: u64,
    pub labels: LabelSpace,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kshot: Option<KShotSelection>,
}

impl DatasetManifest {
    pub fn empty(root: impl Into<PathBuf>, labels: LabelSpace) -> Self {
        Self {
            schema: MANIFEST_SCHEMA.into(),
            root: root.into(),
            seed: 0,
            labels,
            images: Vec::new(),
            annotations: Vec::new(),
            kshot: None,
        }
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|r| r.id == id)
    }

    pub fn image_path(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.file)
    }

    pub fn label(&self, class: &str) -> Option<ClassLabel> {
        self.labels.label(class)
    }

    /// Checks every cross-reference invariant.
    pub fn validate(&self) -> Result<()> {
        let ids: BTreeSet<&str> = self.images.iter().map(|r| r.id.as_str()).collect();
        if ids.len() != self.images.len() {
            return Err(DatasetError::IdCollision("duplicate image id".into()));
        }
        let mut ann_ids = BTreeSet::new();
        for a in &self.annotations {
            if !ids.contains(a.image_id.as_str()) {
                return Err(DatasetError::DanglingAnnotation {
                    annotation: a.id.clone(),
                    image: a.image_id.clone(),
                });
            }
            if !ann_ids.insert(a.id.as_str()) {
                return Err(DatasetError::IdCollision(a.id.clone()));
            }
        }
        if let Some(ks) = &self.kshot {
            let by_id: HashMap<&str, &AnnotationRecord> =
                self.annotations.iter().map(|a| (a.id.as_str(), a)).collect();
            for (class, sel) in &ks.selected {
                if sel.len() != ks.k {
                    return Err(DatasetError::InvalidKShot(format!(
                        "{class} has {} selections, expected {}",
                        sel.len(),
                        ks.k
                    )));
                }
                for id in sel {
                    match by_id.get(id.as_str()) {
                        Some(a) if &a.class == class => {}
                        _ => {
                            return Err(DatasetError::InvalidKShot(format!(
                                "{id} is not an annotation of {class}"
                            )))
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Sorted ids of images without any novel-class annotation.
    pub fn novel_free_image_ids(&self) -> Vec<String> {
        let tainted: BTreeSet<&str> = self
            .annotations
            .iter()
            .filter(|a| self.label(&a.class).is_some_and(|l| l.is_novel()))
            .map(|a| a.image_id.as_str())
            .collect();
        let mut ids: Vec<String> = self
            .images
            .iter()
            .filter(|r| !tainted.contains(r.id.as_str()))
            .map(|r| r.id.clone())
            .collect();
        ids.sort();
        ids
    }

    /// The few-shot training view: only the selected annotations and the
    /// images that carry them.
    pub fn fewshot_subset(&self) -> Result<DatasetManifest> {
        let ks = self.kshot.as_ref().ok_or(DatasetError::NoKShot)?;
        let chosen: BTreeSet<&str> = ks.ids().collect();
        let annotations: Vec<AnnotationRecord> = self
            .annotations
            .iter()
            .filter(|a| chosen.contains(a.id.as_str()))
            .cloned()
            .collect();
        let used: BTreeSet<&str> = annotations.iter().map(|a| a.image_id.as_str()).collect();
        let images = self
            .images
            .iter()
            .filter(|r| used.contains(r.id.as_str()))
            .cloned()
            .collect();
        Ok(DatasetManifest {
            images,
            annotations,
            ..self.clone()
        })
    }

    /// Equality ignoring where the dataset lives on disk.
    pub fn same_content(&self, other: &DatasetManifest) -> bool {
        let strip = |m: &DatasetManifest| DatasetManifest {
            root: PathBuf::new(),
            ..m.clone()
        };
        strip(self) == strip(other)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load_json(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| DatasetError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(DatasetError::Format {
                path: path.to_path_buf(),
                message: format!("unsupported schema {:?}", m.schema),
            });
        }
        m.validate()?;
        Ok(m)
    }

    /// Loads every listed image as a context scene.
    pub fn load_contexts(&self, ids: &[String]) -> Result<Vec<ContextScene>> {
        let free: BTreeSet<String> = self.novel_free_image_ids().into_iter().collect();
        ids.iter()
            .map(|id| {
                let rec = self
                    .image(id)
                    .ok_or_else(|| DatasetError::UnknownContext(id.clone()))?;
                let pixels = load_rgb(&self.image_path(rec))?;
                let existing = self
                    .annotations
                    .iter()
                    .filter(|a| &a.image_id == id)
                    .map(|a| {
                        let label = self.label(&a.class).unwrap_or_else(|| ClassLabel::base(&a.class));
                        (a.bbox, label)
                    })
                    .collect();
                Ok(ContextScene::new(id.clone(), pixels, existing, free.contains(id))?)
            })
            .collect()
    }
}

pub(crate) fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|source| DatasetError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8())
}

/// Draws exactly `k` instances per novel class by seeded uniform sampling
/// without replacement. Difficult objects are not eligible. The draw is
/// keyed on sorted annotation ids, so record order does not matter.
pub fn sample_kshot<S: AsRef<str>>(
    manifest: &DatasetManifest,
    novel_classes: &[S],
    k: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let mut selected = BTreeMap::new();
    for class in novel_classes {
        let class = class.as_ref();
        if !manifest.label(class).is_some_and(|l| l.is_novel()) {
            return Err(DatasetError::NotNovel(class.to_owned()));
        }
        let mut pool: Vec<&str> = manifest
            .annotations
            .iter()
            .filter(|a| a.class == class && !a.difficult)
            .map(|a| a.id.as_str())
            .collect();
        pool.sort_unstable();
        if pool.len() < k {
            return Err(DatasetError::NotEnoughInstances {
                class: class.to_owned(),
                available: pool.len(),
                k,
            });
        }
        let mut rng = seed::rng_from(seed, &["kshot", class]);
        let mut picks: Vec<String> = rand::seq::index::sample(&mut rng, pool.len(), k)
            .into_iter()
            .map(|i| pool[i].to_owned())
            .collect();
        picks.sort();
        selected.insert(class.to_owned(), picks);
    }
    Ok(DatasetManifest {
        seed,
        kshot: Some(KShotSelection { k, selected }),
        ..manifest.clone()
    })
}

/// Crops one reference per selected annotation. Masks cover the whole crop,
/// matching box-level supervision.
pub fn extract_references(manifest: &DatasetManifest) -> Result<Vec<ReferenceInstance>> {
    let ks = manifest.kshot.as_ref().ok_or(DatasetError::NoKShot)?;
    let by_id: HashMap<&str, &AnnotationRecord> =
        manifest.annotations.iter().map(|a| (a.id.as_str(), a)).collect();
    let mut cache: HashMap<String, RgbImage> = HashMap::new();
    let mut out = Vec::with_capacity(ks.total());
    for (class, ids) in &ks.selected {
        let label = manifest
            .label(class)
            .ok_or_else(|| DatasetError::NotNovel(class.clone()))?;
        for id in ids {
            let ann = by_id
                .get(id.as_str())
                .ok_or_else(|| DatasetError::InvalidKShot(format!("{id} missing")))?;
            let rec = manifest
                .image(&ann.image_id)
                .ok_or_else(|| DatasetError::DanglingAnnotation {
                    annotation: ann.id.clone(),
                    image: ann.image_id.clone(),
                })?;
            if !cache.contains_key(&rec.id) {
                cache.insert(rec.id.clone(), load_rgb(&manifest.image_path(rec))?);
            }
            let img = &cache[&rec.id];
            let (iw, ih) = img.dimensions();
            let x0 = ann.bbox.x_min().max(0.0).floor() as u32;
            let y0 = ann.bbox.y_min().max(0.0).floor() as u32;
            let x1 = (ann.bbox.x_max().ceil().max(0.0) as u32).min(iw);
            let y1 = (ann.bbox.y_max().ceil().max(0.0) as u32).min(ih);
            if x1 <= x0 || y1 <= y0 {
                return Err(DatasetError::DegenerateCrop(id.clone()));
            }
            let crop = image::imageops::crop_imm(img, x0, y0, x1 - x0, y1 - y0).to_image();
            out.push(ReferenceInstance::new(
                crop,
                Mask::full(x1 - x0, y1 - y0),
                label.clone(),
                SourceRef {
                    image_id: rec.id.clone(),
                    bbox: ann.bbox,
                },
            )?);
        }
    }
    Ok(out)
}

/// Union of a few-shot dataset and a synthetic one. Images from a different
/// root are re-pointed with absolute paths.
pub fn merge(fewshot: &DatasetManifest, synthetic: &DatasetManifest) -> Result<DatasetManifest> {
    let image_ids: BTreeSet<&str> = fewshot.images.iter().map(|r| r.id.as_str()).collect();
    if let Some(r) = synthetic.images.iter().find(|r| image_ids.contains(r.id.as_str())) {
        return Err(DatasetError::IdCollision(r.id.clone()));
    }
    let ann_ids: BTreeSet<&str> = fewshot.annotations.iter().map(|a| a.id.as_str()).collect();
    if let Some(a) = synthetic
        .annotations
        .iter()
        .find(|a| ann_ids.contains(a.id.as_str()))
    {
        return Err(DatasetError::IdCollision(a.id.clone()));
    }
    let base: BTreeSet<String> = fewshot
        .labels
        .base()
        .chain(synthetic.labels.base())
        .map(str::to_owned)
        .collect();
    let novel: BTreeSet<String> = fewshot
        .labels
        .novel()
        .chain(synthetic.labels.novel())
        .map(str::to_owned)
        .collect();
    let labels = LabelSpace::new(base, novel).map_err(|e| match e {
        TypeError::OverlappingSplits(names) => DatasetError::SplitConflict(names.join(",")),
        other => other.into(),
    })?;
    let rebase = |r: &ImageRecord| {
        if synthetic.root == fewshot.root || r.file.is_absolute() {
            r.clone()
        } else {
            ImageRecord {
                file: synthetic.root.join(&r.file),
                ..r.clone()
            }
        }
    };
    let mut images = fewshot.images.clone();
    images.extend(synthetic.images.iter().map(rebase));
    let mut annotations = fewshot.annotations.clone();
    annotations.extend(synthetic.annotations.iter().cloned());
    Ok(DatasetManifest {
        schema: MANIFEST_SCHEMA.into(),
        root: fewshot.root.clone(),
        seed: fewshot.seed,
        labels,
        images,
        annotations,
        kshot: fewshot.kshot.clone().or_else(|| synthetic.kshot.clone()),
    })
}
