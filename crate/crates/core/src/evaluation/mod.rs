//! VOC-style detection evaluation: per-class AP and mAP at a fixed IoU.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetManifest;
use crate::types::{iou, BBox};

mod io;

pub use io::{
    format_table, read_coco_results, read_voc_results, read_voc_results_dir, write_coco_results,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("detection references unknown image {0:?}")]
    UnknownImage(String),
    #[error("detection on {image:?} has invalid confidence {value}")]
    InvalidConfidence { image: String, value: f64 },
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("IoU threshold {0} not in (0, 1]")]
    InvalidThreshold(f64),
    #[error("no class has ground truth to evaluate")]
    NoGroundTruth,
    #[error("class sets differ: only in baseline {baseline_only:?}, only in augmented {augmented_only:?}")]
    ClassMismatch {
        baseline_only: Vec<String>,
        augmented_only: Vec<String>,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    pub class: String,
    pub confidence: f64,
}

impl Detection {
    pub fn new(
        image_id: impl Into<String>,
        bbox: BBox,
        class: impl Into<String>,
        confidence: f64,
    ) -> Result<Self> {
        let d = Self {
            image_id: image_id.into(),
            bbox,
            class: class.into(),
            confidence,
        };
        d.check()?;
        Ok(d)
    }

    fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(EvalError::InvalidConfidence {
                image: self.image_id.clone(),
                value: self.confidence,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMetric {
    /// Area under the monotone precision envelope at every recall step.
    #[default]
    AllPoints,
    /// Mean of the envelope sampled at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

impl fmt::Display for ApMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ApMetric::AllPoints => "all-points",
            ApMetric::ElevenPoint => "11-point",
        })
    }
}

impl std::str::FromStr for ApMetric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all-points" | "all" => Ok(ApMetric::AllPoints),
            "11-point" | "eleven-point" | "11" => Ok(ApMetric::ElevenPoint),
            _ => Err(format!("unknown AP metric {s:?} (expected all-points or 11-point)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    pub metric: ApMetric,
    /// Restrict evaluation to these classes; `None` evaluates every class
    /// with ground truth.
    pub classes: Option<Vec<String>>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            metric: ApMetric::AllPoints,
            classes: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    /// Non-difficult ground-truth boxes.
    pub gt: usize,
    pub tp: usize,
    pub fp: usize,
}

/// APs are fractions in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub metric: ApMetric,
    pub ap: BTreeMap<String, f64>,
    pub map: f64,
    #[serde(default)]
    pub counts: BTreeMap<String, ClassCounts>,
}

impl EvalReport {
    /// Builds a report from published percentages. The mAP is taken as given
    /// since published tables round per-class and mean values independently.
    pub fn from_percentages<S: AsRef<str>>(per_class: &[(S, f64)], map_percent: f64) -> Self {
        Self {
            iou_threshold: 0.5,
            metric: ApMetric::AllPoints,
            ap: per_class
                .iter()
                .map(|(c, v)| (c.as_ref().to_owned(), v / 100.0))
                .collect(),
            map: map_percent / 100.0,
            counts: BTreeMap::new(),
        }
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| EvalError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Tp,
    Fp,
    /// Matched a difficult box; neither rewarded nor penalised.
    Ignored,
}

/// Descending confidence, then image id, then box coordinates.
fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then_with(|| {
            a.bbox
                .coords()
                .iter()
                .zip(b.bbox.coords().iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

type GroundTruth<'a> = HashMap<&'a str, Vec<(BBox, bool)>>;

fn match_class(gt: &GroundTruth<'_>, mut dets: Vec<&Detection>, threshold: f64) -> Vec<Outcome> {
    dets.sort_by(|a, b| rank_order(a, b));
    let mut used: HashMap<&str, Vec<bool>> = gt
        .iter()
        .map(|(k, v)| (*k, vec![false; v.len()]))
        .collect();
    dets.iter()
        .map(|d| {
            let Some(boxes) = gt.get(d.image_id.as_str()) else {
                return Outcome::Fp;
            };
            let used = used.get_mut(d.image_id.as_str()).expect("same keys");
            let mut best: Option<(usize, f64)> = None;
            for (j, (b, _)) in boxes.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let o = iou(&d.bbox, b);
                if o >= threshold && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) if boxes[j].1 => Outcome::Ignored,
                Some((j, _)) => {
                    used[j] = true;
                    Outcome::Tp
                }
                None => Outcome::Fp,
            }
        })
        .collect()
}

/// Precision after each counted rank, with the cumulative TP count.
fn pr_curve(outcomes: &[Outcome]) -> Vec<(usize, f64)> {
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut out = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Tp => tp += 1,
            Outcome::Fp => fp += 1,
            Outcome::Ignored => continue,
        }
        out.push((tp, tp as f64 / (tp + fp) as f64));
    }
    out
}

fn average_precision(outcomes: &[Outcome], npos: usize, metric: ApMetric) -> f64 {
    let curve = pr_curve(outcomes);
    let mut envelope: Vec<f64> = curve.iter().map(|&(_, p)| p).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    match metric {
        ApMetric::AllPoints => {
            // Recall only moves on a TP, by 1/npos each time.
            let mut prev_tp = 0;
            let mut sum = 0.0;
            for (&(tp, _), &p) in curve.iter().zip(&envelope) {
                if tp > prev_tp {
                    sum += p;
                    prev_tp = tp;
                }
            }
            sum / npos as f64
        }
        ApMetric::ElevenPoint => {
            let mut sum = 0.0;
            for t in 0..=10usize {
                // first rank reaching recall t/10; the envelope there is the max beyond it
                let p = curve
                    .iter()
                    .position(|&(tp, _)| tp * 10 >= t * npos)
                    .map_or(0.0, |i| envelope[i]);
                sum += p;
            }
            sum / 11.0
        }
    }
}

pub fn evaluate(
    groundtruth: &DatasetManifest,
    detections: &[Detection],
    options: &EvalOptions,
) -> Result<EvalReport> {
    let thr = options.iou_threshold;
    if !(thr > 0.0 && thr <= 1.0) {
        return Err(EvalError::InvalidThreshold(thr));
    }
    let images: HashSet<&str> = groundtruth.images.iter().map(|i| i.id.as_str()).collect();
    for d in detections {
        d.check()?;
        if !images.contains(d.image_id.as_str()) {
            return Err(EvalError::UnknownImage(d.image_id.clone()));
        }
        if groundtruth.labels.label(&d.class).is_none() {
            return Err(EvalError::UnknownClass(d.class.clone()));
        }
    }

    let mut per_class: BTreeMap<&str, GroundTruth<'_>> = BTreeMap::new();
    for a in &groundtruth.annotations {
        per_class
            .entry(a.class.as_str())
            .or_default()
            .entry(a.image_id.as_str())
            .or_default()
            .push((a.bbox, a.difficult));
    }
    let npos = |gt: &GroundTruth<'_>| gt.values().flatten().filter(|(_, d)| !d).count();

    let classes: Vec<&str> = match &options.classes {
        Some(list) => {
            for c in list {
                if groundtruth.labels.label(c).is_none() {
                    return Err(EvalError::UnknownClass(c.clone()));
                }
            }
            let mut v: Vec<&str> = list.iter().map(String::as_str).collect();
            v.sort_unstable();
            v.dedup();
            v.retain(|c| per_class.get(c).is_some_and(|g| npos(g) > 0));
            v
        }
        None => per_class
            .iter()
            .filter(|(_, g)| npos(g) > 0)
            .map(|(c, _)| *c)
            .collect(),
    };
    if classes.is_empty() {
        return Err(EvalError::NoGroundTruth);
    }

    let results: Vec<(String, f64, ClassCounts)> = classes
        .par_iter()
        .map(|&class| {
            let gt = &per_class[class];
            let dets: Vec<&Detection> = detections.iter().filter(|d| d.class == class).collect();
            let outcomes = match_class(gt, dets, thr);
            let n = npos(gt);
            let counts = ClassCounts {
                gt: n,
                tp: outcomes.iter().filter(|o| **o == Outcome::Tp).count(),
                fp: outcomes.iter().filter(|o| **o == Outcome::Fp).count(),
            };
            (class.to_owned(), average_precision(&outcomes, n, options.metric), counts)
        })
        .collect();

    let map = results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64;
    Ok(EvalReport {
        iou_threshold: thr,
        metric: options.metric,
        ap: results.iter().map(|r| (r.0.clone(), r.1)).collect(),
        counts: results.into_iter().map(|r| (r.0, r.2)).collect(),
        map,
    })
}

/// Augmented minus baseline, in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub per_class: BTreeMap<String, f64>,
    pub map: f64,
}

impl fmt::Display for DeltaReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:+.2}", "mAP", self.map)?;
        for (c, d) in &self.per_class {
            writeln!(f, "{c:<16} {d:+.2}")?;
        }
        Ok(())
    }
}

pub fn delta_report(baseline: &EvalReport, augmented: &EvalReport) -> Result<DeltaReport> {
    let only = |a: &EvalReport, b: &EvalReport| -> Vec<String> {
        a.ap.keys().filter(|k| !b.ap.contains_key(*k)).cloned().collect()
    };
    let (baseline_only, augmented_only) = (only(baseline, augmented), only(augmented, baseline));
    if !baseline_only.is_empty() || !augmented_only.is_empty() {
        return Err(EvalError::ClassMismatch {
            baseline_only,
            augmented_only,
        });
    }
    Ok(DeltaReport {
        per_class: augmented
            .ap
            .iter()
            .map(|(c, a)| (c.clone(), (a - baseline.ap[c]) * 100.0))
            .collect(),
        map: (augmented.map - baseline.map) * 100.0,
    })
}
