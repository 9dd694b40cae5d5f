//! Minibatch Adam training of the full model against a labeled manifest.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::dataset::{derive_seed, Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::total_loss;
use crate::store::ParamStore;

use super::checkpoint::save_checkpoint;
use super::data::load_input;
use super::eval::predictions_for_entries;
use super::optim::Adam;
use super::TrainConfig;

/// One line of the per-epoch log.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_srocc: Option<f64>,
    pub val_plcc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epoch_logs: Vec<EpochLog>,
    /// Loss of every optimization step in order.
    pub step_losses: Vec<f64>,
    pub steps: usize,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.step_losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.step_losses.last().copied()
    }
}

fn labeled(entries: Vec<&ManifestEntry>) -> Result<Vec<(&ManifestEntry, f64)>> {
    entries
        .into_iter()
        .map(|e| {
            e.score
                .map(|s| (e, s))
                .ok_or_else(|| Error::Manifest(format!("entry {} has no score; attach labels first", e.path)))
        })
        .collect()
}

/// Train on the manifest's train split; evaluates the test split (when
/// non-empty) after each epoch. Writes a checkpoint at `out` if given.
pub fn train(
    cfg: &TrainConfig,
    manifest: &Manifest,
    out: Option<&Path>,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    let device = Device::Cpu;
    let dtype = cfg.model.precision.dtype();

    let train_items = labeled(manifest.entries_in(Split::Train))?;
    if train_items.is_empty() {
        return Err(Error::Manifest("manifest has no train-split entries".into()));
    }
    let val_entries = manifest.entries_in(Split::Test);

    let mut store = ParamStore::new(dtype, device.clone(), cfg.seed);
    let model = Model::new(&cfg.model, &mut store)?;

    let vars = if cfg.freeze_backbones {
        store.trainable_vars_excluding(&["rm.", "stm."])
    } else {
        store.trainable_vars()
    };
    let mut adam = Adam::new(vars, cfg.learning_rate)?;
    // frozen backbones also keep their batch-norm statistics fixed
    let backbone_train = !cfg.freeze_backbones;

    // desk-scale: decode the training set once
    let mut cache: HashMap<PathBuf, Tensor> = HashMap::new();
    for (entry, _) in &train_items {
        let path = manifest.resolve(entry);
        if !cache.contains_key(&path) {
            let t = load_input(
                &path,
                cfg.model.input_resolution,
                cfg.model.normalization.as_ref(),
                dtype,
                &device,
            )?;
            cache.insert(path, t);
        }
    }

    let mut report = TrainReport {
        epoch_logs: Vec::new(),
        step_losses: Vec::new(),
        steps: 0,
    };

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, &["shuffle", &epoch.to_string()]));
        order.shuffle(&mut rng);

        let mut epoch_losses = Vec::new();
        let mut epoch_steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            // the pairwise ranking term needs at least two samples
            if chunk.len() < 2 {
                continue;
            }
            let imgs: Vec<Tensor> = chunk
                .iter()
                .map(|&i| cache[&manifest.resolve(train_items[i].0)].unsqueeze(0))
                .collect::<candle_core::Result<_>>()?;
            let batch = Tensor::cat(&imgs, 0)?;
            let targets = Tensor::from_vec(
                chunk.iter().map(|&i| train_items[i].1).collect::<Vec<f64>>(),
                (chunk.len(),),
                &device,
            )?
            .to_dtype(dtype)?;

            let scores = model.forward(&batch, backbone_train)?.to_dtype(candle_core::DType::F64)?;
            let targets = targets.to_dtype(candle_core::DType::F64)?;
            let loss = total_loss(&scores, &targets, &cfg.loss)?;
            let grads = loss.backward()?;
            adam.step(&grads)?;

            let loss_value = loss.to_scalar::<f64>()?;
            report.step_losses.push(loss_value);
            epoch_losses.push(loss_value);
            report.steps += 1;
            epoch_steps += 1;
            if let Some(max) = cfg.max_steps {
                if report.steps >= max {
                    log_epoch(
                        cfg, manifest, &model, epoch, epoch_steps, &epoch_losses, &val_entries, &mut report,
                        &mut progress,
                    )?;
                    break 'epochs;
                }
            }
        }
        log_epoch(
            cfg, manifest, &model, epoch, epoch_steps, &epoch_losses, &val_entries, &mut report, &mut progress,
        )?;
    }

    if let Some(path) = out {
        save_checkpoint(&store, cfg, path)?;
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn log_epoch(
    cfg: &TrainConfig,
    manifest: &Manifest,
    model: &Model,
    epoch: usize,
    steps: usize,
    losses: &[f64],
    val_entries: &[&ManifestEntry],
    report: &mut TrainReport,
    progress: &mut impl FnMut(&EpochLog),
) -> Result<()> {
    let train_loss = if losses.is_empty() {
        f64::NAN
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    };
    let (val_srocc, val_plcc) = if val_entries.is_empty() {
        (None, None)
    } else {
        let rows = predictions_for_entries(model, &cfg.model, manifest, val_entries)?;
        let preds: Vec<f64> = rows.iter().map(|r| r.prediction).collect();
        let targets: Vec<f64> = rows.iter().map(|r| r.target).collect();
        match (
            crate::objectives::srocc(&preds, &targets),
            crate::objectives::plcc(&preds, &targets),
        ) {
            (Ok(s), Ok(p)) => (Some(s), Some(p)),
            // undefined mid-training correlation (e.g. constant output) is
            // logged as absent rather than aborting the run
            _ => (None, None),
        }
    };
    let log = EpochLog {
        epoch,
        steps,
        train_loss,
        val_srocc,
        val_plcc,
    };
    progress(&log);
    report.epoch_logs.push(log);
    Ok(())
}
