//! Evaluation over manifest splits, single-image scoring, and synthetic
//! label generation for desk-scale runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::dataset::{Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::objectives::{plcc, srocc};
use crate::raster::{psnr, Raster};

use super::checkpoint::LoadedModel;
use super::data::load_input;

#[derive(Debug, Clone)]
pub struct PredictionRow {
    pub path: String,
    pub target: f64,
    pub prediction: f64,
}

/// Split-level evaluation: rank correlations plus the per-image table.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub srocc: f64,
    pub plcc: f64,
    pub n_images: usize,
    pub rows: Vec<PredictionRow>,
}

impl EvalReport {
    fn from_rows(rows: Vec<PredictionRow>) -> Result<Self> {
        let preds: Vec<f64> = rows.iter().map(|r| r.prediction).collect();
        let targets: Vec<f64> = rows.iter().map(|r| r.target).collect();
        let srocc = srocc(&preds, &targets).map_err(|e| diagnose(e, &preds))?;
        let plcc = plcc(&preds, &targets).map_err(|e| diagnose(e, &preds))?;
        Ok(Self {
            srocc,
            plcc,
            n_images: rows.len(),
            rows,
        })
    }

    /// Machine-readable per-image table.
    pub fn predictions_csv(&self) -> String {
        let mut out = String::from("path,target,prediction\n");
        for row in &self.rows {
            let _ = writeln!(out, "{},{},{}", row.path, row.target, row.prediction);
        }
        out
    }

    /// Human-readable report.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<40} {:>10} {:>12}", "path", "target", "prediction");
        for row in &self.rows {
            let _ = writeln!(out, "{:<40} {:>10.4} {:>12.4}", row.path, row.target, row.prediction);
        }
        let _ = writeln!(out, "---");
        let _ = writeln!(
            out,
            "n = {}   SROCC = {:.4}   PLCC = {:.4}",
            self.n_images, self.srocc, self.plcc
        );
        out
    }
}

fn diagnose(err: Error, preds: &[f64]) -> Error {
    match err {
        Error::DegenerateMetric(msg) => {
            let sample = preds.first().copied().unwrap_or(f64::NAN);
            Error::DegenerateMetric(format!(
                "{msg}; {} predictions, first = {sample:.6} (model likely collapsed to a constant)",
                preds.len()
            ))
        }
        other => other,
    }
}

fn require_score(entry: &ManifestEntry) -> Result<f64> {
    entry
        .score
        .ok_or_else(|| Error::Manifest(format!("entry {} has no score; attach labels first", entry.path)))
}

/// Score every entry through the model; the same code path serves
/// [`score_image`], so per-image values agree bit for bit.
pub(super) fn predictions_for_entries(
    model: &Model,
    cfg: &ModelConfig,
    manifest: &Manifest,
    entries: &[&ManifestEntry],
) -> Result<Vec<PredictionRow>> {
    let mut rows = Vec::with_capacity(entries.len());
    for entry in entries {
        let target = require_score(entry)?;
        let prediction = score_path(model, cfg, &manifest.resolve(entry))?;
        rows.push(PredictionRow {
            path: entry.path.clone(),
            target,
            prediction,
        });
    }
    Ok(rows)
}

fn score_path(model: &Model, cfg: &ModelConfig, path: &Path) -> Result<f64> {
    let input = load_input(
        path,
        cfg.input_resolution,
        cfg.normalization.as_ref(),
        cfg.precision.dtype(),
        model_device(),
    )?
    .unsqueeze(0)?;
    let score = model.forward(&input, false)?;
    Ok(score.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?[0])
}

fn model_device() -> &'static candle_core::Device {
    &candle_core::Device::Cpu
}

/// Evaluate a loaded checkpoint on one split of a manifest.
pub fn evaluate(loaded: &LoadedModel, manifest: &Manifest, split: Split) -> Result<EvalReport> {
    let entries = manifest.entries_in(split);
    if entries.is_empty() {
        return Err(Error::Manifest(format!("manifest has no entries in the {split} split")));
    }
    let rows = predictions_for_entries(&loaded.model, &loaded.config.model, manifest, &entries)?;
    EvalReport::from_rows(rows)
}

/// Deterministic single-image quality score.
pub fn score_image(loaded: &LoadedModel, image_path: &Path) -> Result<f64> {
    score_path(&loaded.model, &loaded.config.model, image_path)
}

/// Prediction injection for harness verification: replaces the model with
/// the ground truth (or its negation) to pin the metric endpoints.
#[derive(Debug, Clone, Copy)]
pub enum InjectedPredictions {
    GroundTruth,
    NegatedGroundTruth,
}

pub fn evaluate_injected(manifest: &Manifest, split: Split, mode: InjectedPredictions) -> Result<EvalReport> {
    let entries = manifest.entries_in(split);
    if entries.is_empty() {
        return Err(Error::Manifest(format!("manifest has no entries in the {split} split")));
    }
    let rows = entries
        .iter()
        .map(|entry| {
            let target = require_score(entry)?;
            let prediction = match mode {
                InjectedPredictions::GroundTruth => target,
                InjectedPredictions::NegatedGroundTruth => -target,
            };
            Ok(PredictionRow {
                path: entry.path.clone(),
                target,
                prediction,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(rows)
}

/// How synthetic labels are derived.
#[derive(Debug, Clone)]
pub enum LabelMode {
    /// Affine in the severity sum: recipe (1,1,1) scores 4.0, (3,3,3) scores 0.0.
    Recipe,
    /// Min-max rescale of PSNR against the pristine source onto [0, 4].
    Psnr { pristine_dir: PathBuf },
}

/// Score of one recipe under [`LabelMode::Recipe`].
pub fn recipe_label(severity_sum: u8) -> f64 {
    4.0 - (severity_sum as f64 - 3.0) / 6.0 * 4.0
}

/// Attach synthetic scores to every entry (existing scores are replaced).
pub fn synth_labels(manifest: &mut Manifest, mode: &LabelMode) -> Result<()> {
    match mode {
        LabelMode::Recipe => {
            for entry in &mut manifest.entries {
                entry.score = Some(recipe_label(entry.recipe.severity_sum()));
            }
            Ok(())
        }
        LabelMode::Psnr { pristine_dir } => {
            // PSNR of a bit-identical copy is unbounded; cap it to keep the
            // affine map finite
            const PSNR_CAP: f64 = 100.0;
            let mut values = Vec::with_capacity(manifest.entries.len());
            for entry in &manifest.entries {
                let pristine_path = pristine_dir.join(format!("{}_{}.png", entry.patient_id, entry.slice_id));
                if !pristine_path.exists() {
                    return Err(Error::Manifest(format!(
                        "pristine reference {} not found for {}",
                        pristine_path.display(),
                        entry.path
                    )));
                }
                let pristine = Raster::load(&pristine_path)?;
                let degraded = Raster::load(&manifest.resolve(entry))?;
                values.push(psnr(&pristine, &degraded)?.min(PSNR_CAP));
            }
            let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (entry, v) in manifest.entries.iter_mut().zip(values) {
                let score = if max > min { 4.0 * (v - min) / (max - min) } else { 2.0 };
                entry.score = Some(score);
            }
            Ok(())
        }
    }
}
