//! Dataset factory: mixed-distortion synthesis over pristine slices,
//! rater-score aggregation, patient-disjoint splitting, and manifest I/O.
//!
//! The manifest is a UTF-8 CSV with header
//! `path,patient_id,slice_id,poisson,gaussian,jpeg,score,split`; paths are
//! relative to the manifest's directory. Score and split cells are empty
//! until labels are attached and the split is assigned.

pub mod distort;
pub mod phantom;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

pub use distort::{apply_gaussian, apply_jpeg, apply_poisson, apply_recipe, derive_seed, DistortionParams};
pub use phantom::{phantom_slice, write_phantom_set};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Severity-level triple defining one degraded variant.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DistortionRecipe {
    pub poisson: u8,
    pub gaussian: u8,
    pub jpeg: u8,
}

impl DistortionRecipe {
    pub fn new(poisson: u8, gaussian: u8, jpeg: u8) -> Result<Self> {
        let recipe = Self {
            poisson,
            gaussian,
            jpeg,
        };
        recipe.validate()?;
        Ok(recipe)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("poisson", self.poisson),
            ("gaussian", self.gaussian),
            ("jpeg", self.jpeg),
        ] {
            if !(1..=3).contains(&v) {
                return Err(Error::Config(format!("{name} level must be in 1..=3, got {v}")));
            }
        }
        Ok(())
    }

    /// All 27 recipes, lexicographic in (poisson, gaussian, jpeg).
    pub fn all() -> Vec<Self> {
        let mut out = Vec::with_capacity(27);
        for p in 1..=3 {
            for g in 1..=3 {
                for j in 1..=3 {
                    out.push(Self {
                        poisson: p,
                        gaussian: g,
                        jpeg: j,
                    });
                }
            }
        }
        out
    }

    /// File-name suffix, e.g. `p1g2j3`.
    pub fn suffix(&self) -> String {
        format!("p{}g{}j{}", self.poisson, self.gaussian, self.jpeg)
    }

    pub fn severity_sum(&self) -> u8 {
        self.poisson + self.gaussian + self.jpeg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train|test)"))),
        }
    }
}

/// One degraded image bound to its origin, recipe, label, and split.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub path: String,
    pub patient_id: String,
    pub slice_id: String,
    pub recipe: DistortionRecipe,
    pub score: Option<f64>,
    pub split: Option<Split>,
}

/// Flat CSV row mirroring the manifest schema.
#[derive(Serialize, Deserialize)]
struct ManifestRow {
    path: String,
    patient_id: String,
    slice_id: String,
    poisson: u8,
    gaussian: u8,
    jpeg: u8,
    score: Option<f64>,
    split: Option<Split>,
}

impl From<&ManifestEntry> for ManifestRow {
    fn from(e: &ManifestEntry) -> Self {
        Self {
            path: e.path.clone(),
            patient_id: e.patient_id.clone(),
            slice_id: e.slice_id.clone(),
            poisson: e.recipe.poisson,
            gaussian: e.recipe.gaussian,
            jpeg: e.recipe.jpeg,
            score: e.score,
            split: e.split,
        }
    }
}

impl From<ManifestRow> for ManifestEntry {
    fn from(r: ManifestRow) -> Self {
        Self {
            path: r.path,
            patient_id: r.patient_id,
            slice_id: r.slice_id,
            recipe: DistortionRecipe {
                poisson: r.poisson,
                gaussian: r.gaussian,
                jpeg: r.jpeg,
            },
            score: r.score,
            split: r.split,
        }
    }
}

/// Dataset index; `dir` anchors the entries' relative paths.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let mut reader = csv::Reader::from_path(path)?;
        let mut entries = Vec::new();
        for row in reader.deserialize::<ManifestRow>() {
            entries.push(ManifestEntry::from(row?));
        }
        let manifest = Self { dir, entries };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut writer = csv::Writer::from_path(path)?;
        for entry in &self.entries {
            writer.serialize(ManifestRow::from(entry))?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for entry in &self.entries {
            entry.recipe.validate()?;
            if let Some(score) = entry.score {
                if !(0.0..=4.0).contains(&score) {
                    return Err(Error::Manifest(format!(
                        "score {score} of {} outside the 0..=4 label scale",
                        entry.path
                    )));
                }
            }
            if !seen.insert(entry.path.as_str()) {
                return Err(Error::Manifest(format!("duplicate path {}", entry.path)));
            }
        }
        Ok(())
    }

    /// Absolute path of an entry's image file.
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.dir.join(&entry.path)
    }

    pub fn entries_in(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Some(split)).collect()
    }

    pub fn patients(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.patient_id.clone()).collect()
    }
}

/// Parse `{patient}_{slice}` from a pristine file stem (split at the last
/// underscore).
fn parse_pristine_name(stem: &str) -> Result<(String, String)> {
    match stem.rsplit_once('_') {
        Some((patient, slice)) if !patient.is_empty() && !slice.is_empty() => {
            Ok((patient.to_string(), slice.to_string()))
        }
        _ => Err(Error::Manifest(format!(
            "pristine file {stem:?} does not follow the {{patient}}_{{slice}} naming convention"
        ))),
    }
}

/// Synthesize all 27 degraded variants of every pristine image in
/// `pristine_dir` into `out_dir`, returning the (unlabeled, unsplit)
/// manifest that was also written to `out_dir/manifest.csv`.
///
/// Reproducible: per-image seeds derive from
/// (seed, patient, slice, recipe), so a rebuild with the same seed is
/// bit-identical regardless of traversal order.
pub fn build_dataset(pristine_dir: &Path, out_dir: &Path, seed: u64, params: &DistortionParams) -> Result<Manifest> {
    let mut sources: Vec<PathBuf> = std::fs::read_dir(pristine_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    sources.sort();
    if sources.is_empty() {
        return Err(Error::Manifest(format!(
            "no .png files found in {}",
            pristine_dir.display()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(sources.len() * 27);
    for source in &sources {
        let stem = source
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Manifest(format!("unreadable file name {}", source.display())))?;
        let (patient, slice) = parse_pristine_name(stem)?;
        let pristine = Raster::load(source)?;
        for recipe in DistortionRecipe::all() {
            let image_seed = derive_seed(seed, &[&patient, &slice, &recipe.suffix()]);
            let degraded = apply_recipe(&pristine, &recipe, image_seed, params)?;
            let name = format!("{patient}_{slice}_{}.png", recipe.suffix());
            degraded.save_png(&out_dir.join(&name))?;
            entries.push(ManifestEntry {
                path: name,
                patient_id: patient.clone(),
                slice_id: slice.clone(),
                recipe,
                score: None,
                split: None,
            });
        }
    }
    let manifest = Manifest {
        dir: out_dir.to_path_buf(),
        entries,
    };
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Arithmetic mean of the raters' integer scores.
pub fn aggregate_scores(raters: &[u8]) -> Result<f64> {
    if raters.is_empty() {
        return Err(Error::Manifest("cannot aggregate an empty rater list".into()));
    }
    for &r in raters {
        if r > 4 {
            return Err(Error::Manifest(format!("rater score {r} outside the 0..=4 scale")));
        }
    }
    Ok(raters.iter().map(|&r| r as f64).sum::<f64>() / raters.len() as f64)
}

/// Attach scores from a rater CSV (`path,r1,...,rK`) to matching entries.
pub fn apply_rater_scores(manifest: &mut Manifest, csv_path: &Path) -> Result<()> {
    let mut reader = csv::Reader::from_path(csv_path)?;
    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let mut fields = record.iter();
        let path = fields
            .next()
            .ok_or_else(|| Error::Manifest("rater CSV row without a path".into()))?
            .to_string();
        let raters: Vec<u8> = fields
            .map(|f| {
                f.parse::<u8>()
                    .map_err(|_| Error::Manifest(format!("rater score {f:?} for {path} is not an integer")))
            })
            .collect::<Result<_>>()?;
        scores.insert(path, aggregate_scores(&raters)?);
    }
    for entry in &mut manifest.entries {
        if let Some(&score) = scores.get(&entry.path) {
            entry.score = Some(score);
        }
    }
    Ok(())
}

/// Assign train/test splits so that no patient appears in both.
///
/// Patients are shuffled with the seed; `floor(train_fraction * P)` of them
/// (clamped so both splits are non-empty) become the training set.
pub fn split_by_patient(manifest: &mut Manifest, train_fraction: f64, seed: u64) -> Result<()> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Config(format!(
            "train_fraction must lie in [0, 1], got {train_fraction}"
        )));
    }
    let mut patients: Vec<String> = manifest.patients().into_iter().collect();
    if patients.len() < 2 {
        return Err(Error::Manifest(format!(
            "patient-disjoint splitting needs at least 2 patients, got {}",
            patients.len()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, &["patient-split"]));
    patients.shuffle(&mut rng);
    let train_count = ((train_fraction * patients.len() as f64).floor() as usize).clamp(1, patients.len() - 1);
    let train_set: BTreeSet<&String> = patients.iter().take(train_count).collect();
    for entry in &mut manifest.entries {
        entry.split = Some(if train_set.contains(&entry.patient_id) {
            Split::Train
        } else {
            Split::Test
        });
    }
    Ok(())
}
