//! Instance-count × context-count sweeps over synthesized datasets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compositing::{Backend, Compositor};
use crate::dataset::{
    self, extract_references, merge, synthesize, DatasetError, DatasetManifest, KShotSelection,
    PlacementPolicy, SynthesisPlan,
};
use crate::evaluation::{self, EvalError, EvalOptions};
use crate::seed;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid sweep: {0}")]
    InvalidSpec(String),
    #[error("sweep needs {needed} novel-free contexts, manifest has {available}")]
    InsufficientContexts { needed: usize, available: usize },
    #[error("no cell has an mAP to plot")]
    NoEvaluatedCells,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    /// Reference instances drawn per novel class.
    pub instance_counts: Vec<usize>,
    pub context_counts: Vec<usize>,
    pub backend: Backend,
    pub seed: u64,
    /// Instances of each novel class placed into every context.
    pub per_context: u32,
    #[serde(default)]
    pub policy: PlacementPolicy,
    /// Shell command run per cell after substituting `{train_dir}` and
    /// `{out_detections}`.
    #[serde(default)]
    pub detector_command: Option<String>,
    /// Ground truth that detector output is scored against.
    #[serde(default)]
    pub eval_manifest: Option<PathBuf>,
    /// Concurrent detector invocations.
    #[serde(default = "one")]
    pub detector_jobs: usize,
    pub output_dir: PathBuf,
}

fn one() -> usize {
    1
}

impl SweepSpec {
    pub fn new(instance_counts: Vec<usize>, context_counts: Vec<usize>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            instance_counts,
            context_counts,
            backend: Backend::Naive,
            seed: 0,
            per_context: 1,
            policy: PlacementPolicy::default(),
            detector_command: None,
            eval_manifest: None,
            detector_jobs: 1,
            output_dir: output_dir.into(),
        }
    }

    /// Sorted, deduplicated `(instances, contexts)` pairs.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let mut i = self.instance_counts.clone();
        let mut c = self.context_counts.clone();
        i.sort_unstable();
        i.dedup();
        c.sort_unstable();
        c.dedup();
        i.iter().flat_map(|&i| c.iter().map(move |&c| (i, c))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::InvalidSpec(m.into()));
        if self.instance_counts.is_empty() || self.context_counts.is_empty() {
            return bad("both axes need at least one value");
        }
        if self.instance_counts.contains(&0) || self.context_counts.contains(&0) {
            return bad("counts must be >= 1");
        }
        if self.per_context == 0 {
            return bad("per_context must be >= 1");
        }
        if self.detector_jobs == 0 {
            return bad("detector_jobs must be >= 1");
        }
        if self.detector_command.is_some() && self.eval_manifest.is_none() {
            return bad("a detector command needs an evaluation manifest");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub instances: usize,
    pub contexts: usize,
    pub dataset: PathBuf,
    /// Selected annotation ids, all classes.
    pub instance_ids: Vec<String>,
    pub context_ids: Vec<String>,
    pub placed: usize,
    pub skipped: usize,
    pub map: Option<f64>,
    pub detector_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<CellRecord>,
}

impl SweepResult {
    pub fn cell(&self, instances: usize, contexts: usize) -> Option<&CellRecord> {
        self.cells
            .iter()
            .find(|c| c.instances == instances && c.contexts == contexts)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("sweep result serializes");
        fs::write(path, text).map_err(io_err(path))
    }
}

/// Seeded orderings whose prefixes define every cell, so a larger count
/// always extends a smaller one.
struct Orderings {
    instances: BTreeMap<String, Vec<String>>,
    contexts: Vec<String>,
}

fn orderings(kshot: &KShotSelection, contexts: Vec<String>, root_seed: u64) -> Orderings {
    let instances = kshot
        .selected
        .iter()
        .map(|(class, ids)| {
            let mut ids = ids.clone();
            ids.shuffle(&mut seed::rng_from(root_seed, &["sweep", "instances", class]));
            (class.clone(), ids)
        })
        .collect();
    let mut contexts = contexts;
    contexts.shuffle(&mut seed::rng_from(root_seed, &["sweep", "contexts"]));
    Orderings { instances, contexts }
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

fn run_detector(template: &str, train_dir: &Path, out: &Path) -> std::result::Result<(), String> {
    let cmd = template
        .replace("{train_dir}", &shell_quote(&train_dir.to_string_lossy()))
        .replace("{out_detections}", &shell_quote(&out.to_string_lossy()));
    info!("detector: {cmd}");
    let status = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .status()
        .map_err(|e| format!("spawn failed: {e}"))?;
    if !status.success() {
        return Err(format!("detector exited with {status}"));
    }
    Ok(())
}

fn score(out: &Path, gt: &DatasetManifest, novel: &[String]) -> std::result::Result<f64, String> {
    let dets = if out.is_dir() {
        evaluation::read_voc_results_dir(out, novel)
    } else {
        evaluation::read_coco_results(out, gt)
    }
    .map_err(|e| e.to_string())?;
    let opts = EvalOptions {
        classes: Some(novel.to_vec()),
        ..Default::default()
    };
    evaluation::evaluate(gt, &dets, &opts)
        .map(|r| r.map)
        .map_err(|e| e.to_string())
}

/// Materialises every cell under `output_dir/cell_{i}x{c}/` and, when a
/// detector command is configured, scores each one. A failing detector is
/// recorded on its cell and the sweep carries on.
pub fn run_sweep(
    manifest: &DatasetManifest,
    spec: &SweepSpec,
    compositor: &dyn Compositor,
) -> Result<SweepResult> {
    spec.validate()?;
    if compositor.backend() != spec.backend {
        return Err(HarnessError::InvalidSpec(format!(
            "sweep wants {} but compositor is {}",
            spec.backend,
            compositor.backend()
        )));
    }
    let kshot = manifest.kshot.as_ref().ok_or(DatasetError::NoKShot)?;
    let pool = kshot.selected.values().map(Vec::len).min().unwrap_or(0);
    let max_i = *spec.instance_counts.iter().max().expect("validated");
    if max_i > pool {
        return Err(HarnessError::InvalidSpec(format!(
            "{max_i} instances requested but the K-shot pool has {pool} per class"
        )));
    }
    let free = manifest.novel_free_image_ids();
    let max_c = *spec.context_counts.iter().max().expect("validated");
    if max_c > free.len() {
        return Err(HarnessError::InsufficientContexts {
            needed: max_c,
            available: free.len(),
        });
    }
    let gt = spec
        .eval_manifest
        .as_deref()
        .map(DatasetManifest::load_json)
        .transpose()?;

    let out_root = std::path::absolute(&spec.output_dir).map_err(io_err(&spec.output_dir))?;
    fs::create_dir_all(&out_root).map_err(io_err(&out_root))?;
    let order = orderings(kshot, free, spec.seed);
    let novel: Vec<String> = kshot.selected.keys().cloned().collect();

    let mut cells: Vec<CellRecord> = spec
        .cells()
        .par_iter()
        .map(|&(i, c)| -> Result<CellRecord> {
            let selected: BTreeMap<String, Vec<String>> = order
                .instances
                .iter()
                .map(|(class, ids)| {
                    let mut take = ids[..i].to_vec();
                    take.sort();
                    (class.clone(), take)
                })
                .collect();
            let sub = DatasetManifest {
                kshot: Some(KShotSelection { k: i, selected }),
                ..manifest.clone()
            };
            let fewshot = sub.fewshot_subset()?;
            let refs = extract_references(&sub)?;
            let context_ids = order.contexts[..c].to_vec();
            let contexts = manifest.load_contexts(&context_ids)?;
            let cell_seed = seed::derive_seed(spec.seed, &["cell", &i.to_string(), &c.to_string()]);
            let plan = SynthesisPlan {
                policy: spec.policy,
                ..SynthesisPlan::uniform(&context_ids, &novel, spec.per_context, spec.backend, cell_seed)
            };
            let output = synthesize(&refs, &contexts, &manifest.labels, &plan, compositor)?;
            let dir = out_root.join(format!("cell_{i}x{c}"));
            let synthetic = output.write(&dir)?;
            let merged = merge(&fewshot, &synthetic)?;
            dataset::save_voc(&merged, &dir)?;
            info!("cell {i}x{c}: {} placed, {} skipped", output.placed(), output.skipped.len());
            let mut instance_ids: Vec<String> =
                sub.kshot.as_ref().expect("set above").ids().map(str::to_owned).collect();
            instance_ids.sort();
            Ok(CellRecord {
                instances: i,
                contexts: c,
                dataset: dir,
                instance_ids,
                context_ids,
                placed: output.placed(),
                skipped: output.skipped.len(),
                map: None,
                detector_error: None,
            })
        })
        .collect::<Result<_>>()?;

    if let (Some(template), Some(gt)) = (&spec.detector_command, &gt) {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.detector_jobs)
            .build()
            .map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
        pool.install(|| {
            cells.par_iter_mut().for_each(|cell| {
                let out = cell.dataset.join("detections.json");
                let result = run_detector(template, &cell.dataset, &out).and_then(|()| score(&out, gt, &novel));
                match result {
                    Ok(map) => cell.map = Some(map),
                    Err(e) => {
                        warn!("cell {}x{}: {e}", cell.instances, cell.contexts);
                        cell.detector_error = Some(e);
                    }
                }
            })
        });
    }
    let result = SweepResult { cells };
    result.save_json(&out_root.join("sweep.json"))?;
    Ok(result)
}

/// One line of a diversity curve: the other axis held at `fixed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    /// The axis being varied, `instances` or `contexts`.
    pub varied: String,
    pub fixed: usize,
    pub points: Vec<(usize, f64)>,
    /// Cells on this line that had no mAP.
    pub excluded: usize,
}

impl Curve {
    pub fn file_stem(&self) -> String {
        let other = if self.varied == "instances" { "contexts" } else { "instances" };
        format!("{}_at_{other}_{}", self.varied, self.fixed)
    }
}

pub fn curves(result: &SweepResult) -> Vec<Curve> {
    let mut lines: BTreeMap<(&str, usize), Curve> = BTreeMap::new();
    for cell in &result.cells {
        for (varied, fixed, x) in [
            ("contexts", cell.instances, cell.contexts),
            ("instances", cell.contexts, cell.instances),
        ] {
            let curve = lines.entry((varied, fixed)).or_insert_with(|| Curve {
                varied: varied.into(),
                fixed,
                points: Vec::new(),
                excluded: 0,
            });
            match cell.map {
                Some(m) => curve.points.push((x, m)),
                None => curve.excluded += 1,
            }
        }
    }
    lines
        .into_values()
        .filter(|c| !c.points.is_empty())
        .map(|mut c| {
            c.points.sort_by_key(|p| p.0);
            c
        })
        .collect()
}

fn svg(curve: &Curve) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let xs: Vec<f64> = curve.points.iter().map(|p| p.0 as f64).collect();
    let (x0, x1) = (xs[0], xs[xs.len() - 1]);
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |x: f64| pad + (x - x0) / span * (w - 2.0 * pad);
    let py = |m: f64| h - pad - m * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" font-size="11" text-anchor="end">{:.0}</text>"#,
            pad - 6.0,
            py(t) + 4.0,
            t * 100.0
        );
    }
    let pts: Vec<String> = curve
        .points
        .iter()
        .map(|&(x, m)| format!("{:.1},{:.1}", px(x as f64), py(m)))
        .collect();
    let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##, pts.join(" "));
    for &(x, m) in &curve.points {
        let _ = writeln!(s, r##"<circle cx="{:.1}" cy="{:.1}" r="3" fill="#1f77b4"/>"##, px(x as f64), py(m));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" font-size="11" text-anchor="middle">{x}</text>"#,
            px(x as f64),
            h - pad + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{} ({} = {})</text>"#,
        w / 2.0,
        h - 8.0,
        curve.varied,
        if curve.varied == "instances" { "contexts" } else { "instances" },
        curve.fixed
    );
    let _ = writeln!(s, r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">mAP (%)</text>"#, h / 2.0, h / 2.0);
    s.push_str("</svg>\n");
    s
}

/// Writes `<stem>.csv` and `<stem>.svg` per curve into `dir`; returns the
/// CSV paths. Cells without mAP are left out and counted in a trailing
/// `#` comment.
pub fn emit_curves(result: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    let curves = curves(result);
    if curves.is_empty() {
        return Err(HarnessError::NoEvaluatedCells);
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    for curve in &curves {
        let path = dir.join(format!("{}.csv", curve.file_stem()));
        let csv_err = |source| HarnessError::Csv {
            path: path.clone(),
            source,
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([curve.varied.as_str(), "map"]).map_err(csv_err)?;
        for (x, m) in &curve.points {
            w.write_record([x.to_string(), m.to_string()]).map_err(csv_err)?;
        }
        let mut bytes = w.into_inner().map_err(|e| HarnessError::Io {
            path: path.clone(),
            source: e.into_error(),
        })?;
        bytes.extend(format!("# excluded {} cells without mAP\n", curve.excluded).bytes());
        fs::write(&path, bytes).map_err(io_err(&path))?;
        let svg_path = path.with_extension("svg");
        fs::write(&svg_path, svg(curve)).map_err(io_err(&svg_path))?;
        written.push(path);
    }
    Ok(written)
}

/// Reads a curve CSV back as `(x, mAP)` rows, skipping comments.
pub fn read_curve_csv(path: &Path) -> Result<Vec<(usize, f64)>> {
    let csv_err = |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(csv_err)?;
    r.deserialize::<(usize, f64)>()
        .map(|row| row.map_err(csv_err))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(i: usize, c: usize, map: Option<f64>) -> CellRecord {
        CellRecord {
            instances: i,
            contexts: c,
            dataset: PathBuf::new(),
            instance_ids: vec![],
            context_ids: vec![],
            placed: 0,
            skipped: 0,
            map,
            detector_error: None,
        }
    }

    #[test]
    fn spec_cells_are_the_grid() {
        let s = SweepSpec::new(vec![5, 3, 5], vec![40, 20], "/tmp/x");
        assert_eq!(s.cells(), [(3, 20), (3, 40), (5, 20), (5, 40)]);
        assert!(SweepSpec::new(vec![0], vec![1], "/x").validate().is_err());
        let mut s = SweepSpec::new(vec![1], vec![1], "/x");
        s.detector_command = Some("true".into());
        assert!(s.validate().is_err());
    }

    #[test]
    fn orderings_nest_by_prefix() {
        let ks = KShotSelection {
            k: 4,
            selected: [("airplane".to_string(), vec!["a#0".into(), "b#0".into(), "c#1".into(), "d#0".into()])].into(),
        };
        let ctx: Vec<String> = (0..30).map(|i| format!("ctx{i:02}")).collect();
        let a = orderings(&ks, ctx.clone(), 5);
        let b = orderings(&ks, ctx.clone(), 5);
        assert_eq!(a.contexts, b.contexts);
        assert_eq!(a.instances, b.instances);
        assert_ne!(a.contexts, ctx);
    }

    #[test]
    fn curves_and_csv_round_trip() {
        let r = SweepResult {
            cells: vec![
                cell(3, 40, Some(0.3125)),
                cell(3, 20, Some(0.1 + 0.2)),
                cell(5, 20, None),
            ],
        };
        let cs = curves(&r);
        let ctx3 = cs.iter().find(|c| c.varied == "contexts" && c.fixed == 3).unwrap();
        assert_eq!(ctx3.points, [(20, 0.1 + 0.2), (40, 0.3125)]);
        let dir = tempfile::tempdir().unwrap();
        let files = emit_curves(&r, dir.path()).unwrap();
        let p = dir.path().join("contexts_at_instances_3.csv");
        assert!(files.contains(&p));
        assert_eq!(read_curve_csv(&p).unwrap(), ctx3.points);
        let inst20 = fs::read_to_string(dir.path().join("instances_at_contexts_20.csv")).unwrap();
        assert!(inst20.ends_with("# excluded 1 cells without mAP\n"));
        assert!(dir.path().join("contexts_at_instances_3.svg").exists());
        assert!(!dir.path().join("contexts_at_instances_5.csv").exists());

        let none = SweepResult { cells: vec![cell(1, 1, None)] };
        assert!(matches!(emit_curves(&none, dir.path()), Err(HarnessError::NoEvaluatedCells)));
    }

    #[test]
    fn quoting_survives_the_shell() {
        let dir = tempfile::tempdir().unwrap();
        let weird = dir.path().join("it's here");
        fs::create_dir(&weird).unwrap();
        let out = weird.join("o.txt");
        run_detector("echo hi > {out_detections}; test -d {train_dir}", &weird, &out).unwrap();
        assert_eq!(fs::read_to_string(out).unwrap(), "hi\n");
        assert!(run_detector("exit 3", &weird, &weird).is_err());
    }
}
