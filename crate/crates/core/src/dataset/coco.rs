//! Single-file COCO-style JSON export.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, DatasetManifest, Result};
use crate::types::LabelSpace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]`
    pub bbox: [f64; 4],
    pub area: f64,
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    pub supercategory: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// Category ids are 1-based positions in the name-sorted label list.
pub fn category_ids(labels: &LabelSpace) -> BTreeMap<String, u64> {
    labels
        .labels()
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l.name, i as u64 + 1))
        .collect()
}

pub fn to_coco(manifest: &DatasetManifest) -> CocoDataset {
    let cats = category_ids(&manifest.labels);
    let categories = manifest
        .labels
        .labels()
        .into_iter()
        .map(|l| CocoCategory {
            id: cats[&l.name],
            supercategory: if l.is_novel() { "novel" } else { "base" }.into(),
            name: l.name,
        })
        .collect();
    let mut image_ids = BTreeMap::new();
    let images = manifest
        .images
        .iter()
        .enumerate()
        .map(|(i, r)| {
            image_ids.insert(r.id.as_str(), i as u64 + 1);
            CocoImage {
                id: i as u64 + 1,
                file_name: r.file.to_string_lossy().into_owned(),
                width: r.width,
                height: r.height,
            }
        })
        .collect();
    let annotations = manifest
        .annotations
        .iter()
        .enumerate()
        .map(|(i, a)| CocoAnnotation {
            id: i as u64 + 1,
            image_id: image_ids[a.image_id.as_str()],
            category_id: cats.get(&a.class).copied().unwrap_or(0),
            bbox: [a.bbox.x_min(), a.bbox.y_min(), a.bbox.width(), a.bbox.height()],
            area: a.bbox.area(),
            iscrowd: 0,
        })
        .collect();
    CocoDataset {
        images,
        annotations,
        categories,
    }
}

pub fn write_coco(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&to_coco(manifest)).expect("COCO export serializes");
    fs::write(path, text).map_err(io_err(path))
}
