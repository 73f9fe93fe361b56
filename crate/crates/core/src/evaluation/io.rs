//! Detection file formats and report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DeltaReport, Detection, EvalError, EvalReport, Result};
use crate::dataset::coco::category_ids;
use crate::dataset::DatasetManifest;
use crate::types::BBox;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> EvalError {
    EvalError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// One class's VOC results file: `image_id confidence x_min y_min x_max y_max`
/// per line.
pub fn read_voc_results(path: &Path, class: &str) -> Result<Vec<Detection>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 6 {
            return Err(parse_err(path, n + 1, format!("expected 6 fields, got {}", fields.len())));
        }
        let nums = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| parse_err(path, n + 1, e.to_string()))?;
        let bbox = BBox::new(nums[1], nums[2], nums[3], nums[4])
            .map_err(|e| parse_err(path, n + 1, e.to_string()))?;
        out.push(Detection::new(fields[0], bbox, class, nums[0]).map_err(|e| parse_err(path, n + 1, e.to_string()))?);
    }
    Ok(out)
}

/// Reads every `<class>.txt` or `<prefix>_<class>.txt` in `dir` for the given
/// classes, e.g. `comp4_det_test_airplane.txt`.
pub fn read_voc_results_dir<S: AsRef<str>>(dir: &Path, classes: &[S]) -> Result<Vec<Detection>> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|source| EvalError::Io {
            path: dir.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for class in classes {
        let class = class.as_ref();
        let suffix = format!("_{class}");
        for f in &files {
            let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            if stem == class || stem.ends_with(&suffix) {
                out.extend(read_voc_results(f, class)?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum IdOrName {
    Num(u64),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CocoResult {
    image_id: IdOrName,
    category_id: IdOrName,
    /// `[x, y, width, height]`
    bbox: [f64; 4],
    score: f64,
}

/// A COCO results array. Numeric image and category ids follow the
/// numbering of [`crate::dataset::coco::to_coco`]; string ids are taken as
/// manifest image ids and class names.
pub fn read_coco_results(path: &Path, manifest: &DatasetManifest) -> Result<Vec<Detection>> {
    let text = read(path)?;
    let rows: Vec<CocoResult> =
        serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e.to_string()))?;
    let cats: BTreeMap<u64, String> = category_ids(&manifest.labels)
        .into_iter()
        .map(|(name, id)| (id, name))
        .collect();
    rows.into_iter()
        .enumerate()
        .map(|(n, r)| {
            let image_id = match r.image_id {
                IdOrName::Name(s) => s,
                IdOrName::Num(i) => manifest
                    .images
                    .get((i as usize).wrapping_sub(1))
                    .map(|rec| rec.id.clone())
                    .ok_or_else(|| EvalError::UnknownImage(i.to_string()))?,
            };
            let class = match r.category_id {
                IdOrName::Name(s) => s,
                IdOrName::Num(i) => cats
                    .get(&i)
                    .cloned()
                    .ok_or_else(|| EvalError::UnknownClass(i.to_string()))?,
            };
            let [x, y, w, h] = r.bbox;
            let bbox = BBox::from_xywh(x, y, w, h)
                .map_err(|e| parse_err(path, 0, format!("entry {n}: {e}")))?;
            Detection::new(image_id, bbox, class, r.score)
        })
        .collect()
}

/// Writes detections as a COCO results array with string image ids and
/// numeric category ids.
pub fn write_coco_results(detections: &[Detection], manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let cats = category_ids(&manifest.labels);
    let rows = detections
        .iter()
        .map(|d| {
            Ok(CocoResult {
                image_id: IdOrName::Name(d.image_id.clone()),
                category_id: IdOrName::Num(
                    *cats
                        .get(&d.class)
                        .ok_or_else(|| EvalError::UnknownClass(d.class.clone()))?,
                ),
                bbox: [d.bbox.x_min(), d.bbox.y_min(), d.bbox.width(), d.bbox.height()],
                score: d.confidence,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    fs::write(path, serde_json::to_string(&rows).expect("results serialize")).map_err(|source| {
        EvalError::Io {
            path: path.to_path_buf(),
            source,
        }
    })
}

/// One row per report, laid out as `Method | mAP(%) | Δ | classes...`.
/// Δ is filled against `baseline` when given and the class sets agree.
pub fn format_table(rows: &[(&str, &EvalReport)], baseline: Option<&EvalReport>) -> String {
    let mut classes: Vec<&String> = rows.iter().flat_map(|(_, r)| r.ap.keys()).collect();
    classes.sort();
    classes.dedup();
    let name_w = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0).max(6);
    let col_w = |c: &str| c.chars().count().max(7);

    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}  {:>7}  {:>7}", "Method", "mAP(%)", "Δ");
    for c in &classes {
        let _ = write!(out, "  {:>w$}", c, w = col_w(c));
    }
    out.push('\n');
    for (name, r) in rows {
        let delta: Option<DeltaReport> = baseline.and_then(|b| super::delta_report(b, r).ok());
        let d = match delta {
            Some(d) if !std::ptr::eq(*r, baseline.unwrap()) => format!("{:+.2}", d.map),
            _ => "-".into(),
        };
        let _ = write!(out, "{:<name_w$}  {:>7.2}  {:>7}", name, r.map * 100.0, d);
        for c in &classes {
            match r.ap.get(*c) {
                Some(v) => {
                    let _ = write!(out, "  {:>w$.2}", v * 100.0, w = col_w(c));
                }
                None => {
                    let _ = write!(out, "  {:>w$}", "-", w = col_w(c));
                }
            }
        }
        out.push('\n');
    }
    out
}
