//! `report.json` and the other per-run artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::MetricBundle;
use crate::imageio;
use crate::objectives::LossWeights;
use crate::tensor::Image;
use crate::trainer::{write_loss_trace, ExplanationResult};

/// The report schema: exactly these twelve keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub model: String,
    pub seed: u64,
    pub weights: LossWeights,
    pub y_label: usize,
    pub confidence_original: f64,
    pub confidence_explanation: f64,
    pub active_fraction: f64,
    pub label_preserved: bool,
    pub robustness_rate: f64,
    pub necessity_drop: f64,
    pub steps: usize,
    pub wall_time_s: f64,
}

impl Report {
    pub fn new(model: &str, seed: u64, weights: &LossWeights, result: &ExplanationResult, bundle: &MetricBundle) -> Self {
        Self {
            model: model.to_string(),
            seed,
            weights: weights.clone(),
            y_label: result.y,
            confidence_original: bundle.confidence_original,
            confidence_explanation: bundle.confidence_explanation,
            active_fraction: bundle.active_fraction,
            label_preserved: bundle.label_preserved,
            robustness_rate: bundle.robustness_rate,
            necessity_drop: bundle.necessity_drop,
            steps: result.loss_trace.len(),
            wall_time_s: result.wall_time_s,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }
}

/// Paths of everything [`write_report`] produced.
#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    pub mask: PathBuf,
    pub explanation: PathBuf,
    pub overlay: Option<PathBuf>,
    pub report: PathBuf,
    pub loss_trace: Option<PathBuf>,
}

/// What to write besides the mask, explanation and report.
#[derive(Debug, Clone, Copy)]
pub struct ReportOptions {
    pub overlay: bool,
    pub loss_trace: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { overlay: true, loss_trace: true }
    }
}

/// Writes `mask.png`, `explanation.png`, `overlay.png`, `report.json` and
/// `loss_trace.csv` into `out_dir`, creating it if needed.
pub fn write_report(
    report: &Report,
    result: &ExplanationResult,
    original: &Image,
    out_dir: &Path,
    options: ReportOptions,
) -> Result<ArtifactPaths> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let paths = ArtifactPaths {
        mask: out_dir.join("mask.png"),
        explanation: out_dir.join("explanation.png"),
        overlay: options.overlay.then(|| out_dir.join("overlay.png")),
        report: out_dir.join("report.json"),
        loss_trace: options.loss_trace.then(|| out_dir.join("loss_trace.csv")),
    };
    imageio::save_mask_png(&result.mask, &paths.mask)?;
    imageio::save_image_png(&result.explanation, &paths.explanation)?;
    if let Some(p) = &paths.overlay {
        imageio::save_overlay_png(original, &result.mask, p)?;
    }
    if let Some(p) = &paths.loss_trace {
        write_loss_trace(&result.loss_trace, p)?;
    }
    std::fs::write(&paths.report, report.to_json()).map_err(|e| Error::io(&paths.report, e))?;
    Ok(paths)
}
