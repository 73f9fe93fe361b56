//! Run configuration: flags over a TOML file over built-in defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ctxforge::types::{DIOR_CLASSES, DIOR_NOVEL};
use ctxforge::Backend;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Every setting that can come from the config file or a flag. `None` means
/// "not given at this layer".
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub root: Option<PathBuf>,
    pub classes: Option<Vec<String>>,
    pub novel: Option<Vec<String>>,
    pub class_map: Option<BTreeMap<String, String>>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub backend: Option<String>,
    pub endpoint: Option<String>,
    pub mock: Option<bool>,
    pub steps: Option<u32>,
    pub timeout_secs: Option<u64>,
    pub retries: Option<u32>,
    pub max_in_flight: Option<usize>,
    pub out: Option<PathBuf>,
    pub contexts: Option<usize>,
    pub per_context: Option<u32>,
    pub overlap_threshold: Option<f64>,
    pub scale_min: Option<f64>,
    pub scale_max: Option<f64>,
    pub max_attempts: Option<u32>,
    pub sweep_instances: Option<Vec<usize>>,
    pub sweep_contexts: Option<Vec<usize>>,
    pub detector_command: Option<String>,
    pub eval_manifest: Option<PathBuf>,
    pub detector_jobs: Option<usize>,
    pub preview_count: Option<usize>,
    pub jobs: Option<usize>,
}

impl Layer {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
    }

    /// Fields set here win over `lower`.
    pub fn over(self, lower: Layer) -> Layer {
        macro_rules! pick {
            ($($f:ident),*) => { Layer { $($f: self.$f.or(lower.$f)),* } };
        }
        pick!(
            root, classes, novel, class_map, k, seed, backend, endpoint, mock, steps, timeout_secs,
            retries, max_in_flight, out, contexts, per_context, overlap_threshold, scale_min, scale_max,
            max_attempts, sweep_instances, sweep_contexts, detector_command, eval_manifest,
            detector_jobs, preview_count, jobs
        )
    }
}

/// The fully resolved settings, echoed to `config.resolved.toml`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub root: Option<PathBuf>,
    pub classes: Vec<String>,
    pub novel: Vec<String>,
    pub k: usize,
    pub seed: u64,
    pub backend: Backend,
    pub endpoint: Option<String>,
    pub mock: bool,
    pub steps: u32,
    pub timeout_secs: u64,
    pub retries: u32,
    pub max_in_flight: usize,
    pub out: PathBuf,
    /// 0 uses every novel-free image.
    pub contexts: usize,
    pub per_context: u32,
    pub overlap_threshold: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_attempts: u32,
    pub sweep_instances: Vec<usize>,
    pub sweep_contexts: Vec<usize>,
    pub detector_command: Option<String>,
    pub eval_manifest: Option<PathBuf>,
    pub detector_jobs: usize,
    pub preview_count: usize,
    /// 0 uses every logical core.
    pub jobs: usize,
    pub class_map: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn resolve(layer: Layer) -> Result<Self, CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let backend: Backend = match layer.backend.as_deref() {
            Some(s) => s.parse().map_err(CliError::Config)?,
            None => Backend::Poisson,
        };
        let cfg = RunConfig {
            root: layer.root,
            classes: layer
                .classes
                .unwrap_or_else(|| DIOR_CLASSES.iter().map(|s| s.to_string()).collect()),
            novel: layer
                .novel
                .unwrap_or_else(|| DIOR_NOVEL.iter().map(|s| s.to_string()).collect()),
            k: layer.k.unwrap_or(3),
            seed: layer.seed.unwrap_or(0),
            backend,
            endpoint: layer.endpoint.filter(|e| !e.is_empty()),
            mock: layer.mock.unwrap_or(false),
            steps: layer.steps.unwrap_or(50),
            timeout_secs: layer.timeout_secs.unwrap_or(120),
            retries: layer.retries.unwrap_or(2),
            max_in_flight: layer.max_in_flight.unwrap_or(4),
            out: layer.out.unwrap_or_else(|| PathBuf::from("out")),
            contexts: layer.contexts.unwrap_or(0),
            per_context: layer.per_context.unwrap_or(1),
            overlap_threshold: layer.overlap_threshold.unwrap_or(0.1),
            scale_min: layer.scale_min.unwrap_or(0.7),
            scale_max: layer.scale_max.unwrap_or(1.3),
            max_attempts: layer.max_attempts.unwrap_or(50),
            sweep_instances: layer.sweep_instances.unwrap_or_else(|| vec![1, 2, 3]),
            sweep_contexts: layer.sweep_contexts.unwrap_or_else(|| vec![10, 20, 40]),
            detector_command: layer.detector_command,
            eval_manifest: layer.eval_manifest,
            detector_jobs: layer.detector_jobs.unwrap_or(1),
            preview_count: layer.preview_count.unwrap_or(4),
            jobs: layer.jobs.unwrap_or(0),
            class_map: layer.class_map.unwrap_or_default(),
        };
        if cfg.backend == Backend::Diffusion && cfg.endpoint.is_none() && !cfg.mock {
            return bad("diffusion backend needs --endpoint, CTXFORGE_ENDPOINT or --mock".into());
        }
        if cfg.novel.is_empty() {
            return bad("no novel classes given".into());
        }
        if let Some(n) = cfg.novel.iter().find(|n| !cfg.classes.contains(n)) {
            return bad(format!("novel class {n:?} is not in the class list"));
        }
        if cfg.k == 0 {
            return bad("k must be >= 1".into());
        }
        if !(0.0..1.0).contains(&cfg.overlap_threshold) {
            return bad(format!("overlap threshold {} not in [0, 1)", cfg.overlap_threshold));
        }
        if !(cfg.scale_min > 0.0 && cfg.scale_min <= cfg.scale_max) {
            return bad(format!("scale range {}..{} is empty", cfg.scale_min, cfg.scale_max));
        }
        if cfg.per_context == 0 || cfg.max_attempts == 0 || cfg.steps == 0 || cfg.max_in_flight == 0 {
            return bad("per-context, max-attempts, steps and max-in-flight must be >= 1".into());
        }
        if cfg.detector_jobs == 0 {
            return bad("detector-jobs must be >= 1".into());
        }
        Ok(cfg)
    }

    pub fn require_root(&self) -> Result<&Path, CliError> {
        self.root
            .as_deref()
            .ok_or_else(|| CliError::Config("--root is required".into()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
