//! Named-parameter store and the flat tensor-container checkpoint format.
//!
//! Every learnable tensor (and non-trainable buffer such as batch-norm
//! running statistics) lives in a [`ParamStore`] under a dotted name like
//! `regressor.score.fc1.weight`. Stores serialize to safetensors files —
//! a flat container with a (name, dtype, shape) manifest — which round-trip
//! bit-exactly. Initialization draws from a ChaCha20 stream owned by the
//! store so that model construction is reproducible from a single seed.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Initialization scheme for a newly created parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal(0, sqrt(2 / fan_in)), the usual choice for conv/linear weights
    /// feeding rectifier-style activations.
    KaimingNormal { fan_in: usize },
    /// Uniform(-b, b) with b = sqrt(1 / fan_in), matching common bias init.
    UniformFanIn { fan_in: usize },
    /// Normal(0, std) resampled until |x| <= 2 std.
    TruncNormal { std: f64 },
}

struct Slot {
    var: Var,
    trainable: bool,
}

/// Ordered map of named parameters backed by candle `Var`s.
pub struct ParamStore {
    names: Vec<String>,
    slots: HashMap<String, Slot>,
    dtype: DType,
    device: Device,
    rng: ChaCha20Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device, seed: u64) -> Self {
        Self {
            names: Vec::new(),
            slots: HashMap::new(),
            dtype,
            device,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn sample(&mut self, len: usize, init: Init) -> Vec<f64> {
        match init {
            Init::Zeros => vec![0.0; len],
            Init::Ones => vec![1.0; len],
            Init::Const(c) => vec![c; len],
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..len).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::UniformFanIn { fan_in } => {
                let bound = (1.0 / fan_in as f64).sqrt();
                (0..len).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
            Init::TruncNormal { std } => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..len)
                    .map(|_| loop {
                        let x = dist.sample(&mut self.rng);
                        if x.abs() <= 2.0 * std {
                            break x;
                        }
                    })
                    .collect()
            }
        }
    }

    /// Fetch or create a parameter. Creating draws from the store RNG;
    /// fetching an existing name with a different shape is an error.
    pub fn get(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<Tensor> {
        if let Some(slot) = self.slots.get(name) {
            let existing = slot.var.as_tensor();
            if existing.dims() != shape {
                return Err(Error::shape(
                    format!("parameter {name}"),
                    format!("{shape:?}"),
                    format!("{:?}", existing.dims()),
                ));
            }
            return Ok(existing.clone());
        }
        let len: usize = shape.iter().product();
        let values = self.sample(len, init);
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.names.push(name.to_string());
        self.slots.insert(name.to_string(), Slot { var, trainable });
        Ok(tensor)
    }

    /// Same as [`get`](Self::get) but returns the `Var` handle (used for
    /// buffers the model mutates in place, e.g. batch-norm running stats).
    pub fn get_var(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<Var> {
        self.get(name, shape, init, trainable)?;
        Ok(self.slots[name].var.clone())
    }

    /// Trainable variables in creation order, paired with their names.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.names
            .iter()
            .filter(|n| self.slots[n.as_str()].trainable)
            .map(|n| (n.clone(), self.slots[n.as_str()].var.clone()))
            .collect()
    }

    /// Trainable variables whose name does not start with any of `excluded`.
    pub fn trainable_vars_excluding(&self, excluded: &[&str]) -> Vec<(String, Var)> {
        self.trainable_vars()
            .into_iter()
            .filter(|(n, _)| !excluded.iter().any(|p| n.starts_with(p)))
            .collect()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        self.slots.get(name).map(|s| s.var.as_tensor().clone())
    }

    /// Overwrite an existing parameter in place.
    pub fn set(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let slot = self
            .slots
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let expected = slot.var.as_tensor().dims().to_vec();
        if value.dims() != expected {
            return Err(Error::shape(
                format!("parameter {name}"),
                format!("{expected:?}"),
                format!("{:?}", value.dims()),
            ));
        }
        slot.var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Serialize every parameter (trainable and buffers) plus optional
    /// string metadata to a flat tensor container at `path`.
    pub fn save(&self, path: &Path, metadata: Option<HashMap<String, String>>) -> Result<()> {
        let mut entries: Vec<(String, Tensor)> = Vec::with_capacity(self.names.len());
        for name in &self.names {
            // contiguous copy: safetensors serializes raw storage
            let t = self.slots[name].var.as_tensor().contiguous()?;
            entries.push((name.clone(), t));
        }
        safetensors::serialize_to_file(entries, &metadata, path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(())
    }

    /// Load matching tensors from `path` into this store.
    ///
    /// Tensors present in the file and the store are copied bit-exact.
    /// A name present in both with a different shape is an error, as is a
    /// file sharing no names with the store at all. Everything else is
    /// reported: `missing` are store parameters the file lacks (left at
    /// their current values), `unexpected` are file tensors the store has
    /// no use for.
    pub fn load(&mut self, path: &Path) -> Result<LoadReport> {
        let loaded = candle_core::safetensors::load(path, &self.device).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut matched = 0usize;
        let mut unexpected: Vec<String> = Vec::new();
        for (name, tensor) in &loaded {
            match self.slots.get(name) {
                Some(slot) => {
                    let expected = slot.var.as_tensor().dims();
                    if tensor.dims() != expected {
                        return Err(Error::shape(
                            format!("checkpoint tensor {name}"),
                            format!("{expected:?}"),
                            format!("{:?}", tensor.dims()),
                        ));
                    }
                    slot.var.set(&tensor.to_dtype(self.dtype)?)?;
                    matched += 1;
                }
                None => unexpected.push(name.clone()),
            }
        }
        if matched == 0 {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: "no tensor names overlap with the target architecture".into(),
            });
        }
        let mut missing: Vec<String> = self
            .names
            .iter()
            .filter(|n| !loaded.contains_key(n.as_str()))
            .cloned()
            .collect();
        missing.sort();
        unexpected.sort();
        Ok(LoadReport { missing, unexpected })
    }
}

/// Outcome of loading a checkpoint into a store.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub missing: Vec<String>,
    pub unexpected: Vec<String>,
}

impl LoadReport {
    pub fn is_exact(&self) -> bool {
        self.missing.is_empty() && self.unexpected.is_empty()
    }
}

/// Read only the string metadata of a checkpoint file.
pub fn read_metadata(path: &Path) -> Result<HashMap<String, String>> {
    let bytes = std::fs::read(path)?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(meta.metadata().clone().unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f64_store(seed: u64) -> ParamStore {
        ParamStore::new(DType::F64, Device::Cpu, seed)
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.safetensors");
        let mut store = f64_store(1);
        store.get("a.weight", &[4, 3], Init::KaimingNormal { fan_in: 3 }, true).unwrap();
        store.get("a.bias", &[4], Init::Zeros, true).unwrap();
        store.save(&path, None).unwrap();

        let mut other = f64_store(2);
        other.get("a.weight", &[4, 3], Init::KaimingNormal { fan_in: 3 }, true).unwrap();
        other.get("a.bias", &[4], Init::Zeros, true).unwrap();
        let report = other.load(&path).unwrap();
        assert!(report.is_exact());

        for name in ["a.weight", "a.bias"] {
            let x = store.tensor(name).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let y = other.tensor(name).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert_eq!(x, y, "{name} differs after round trip");
        }
    }

    #[test]
    fn load_reports_missing_and_unexpected_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.safetensors");
        let mut src = f64_store(1);
        src.get("shared", &[2], Init::Ones, true).unwrap();
        src.get("extra", &[2], Init::Ones, true).unwrap();
        src.save(&path, None).unwrap();

        let mut dst = f64_store(2);
        dst.get("shared", &[2], Init::Zeros, true).unwrap();
        dst.get("absent", &[2], Init::Zeros, true).unwrap();
        let report = dst.load(&path).unwrap();
        assert_eq!(report.missing, vec!["absent".to_string()]);
        assert_eq!(report.unexpected, vec!["extra".to_string()]);
        let shared = dst.tensor("shared").unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(shared, vec![1.0, 1.0]);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.safetensors");
        let mut src = f64_store(1);
        src.get("w", &[3, 3], Init::Ones, true).unwrap();
        src.save(&path, None).unwrap();

        let mut dst = f64_store(2);
        dst.get("w", &[2, 2], Init::Zeros, true).unwrap();
        assert!(matches!(dst.load(&path), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn load_rejects_disjoint_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.safetensors");
        let mut src = f64_store(1);
        src.get("alpha", &[2], Init::Ones, true).unwrap();
        src.save(&path, None).unwrap();

        let mut dst = f64_store(2);
        dst.get("beta", &[2], Init::Zeros, true).unwrap();
        assert!(matches!(dst.load(&path), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn init_is_reproducible_from_seed() {
        let mut a = f64_store(7);
        let mut b = f64_store(7);
        let ta = a.get("w", &[16], Init::TruncNormal { std: 0.02 }, true).unwrap();
        let tb = b.get("w", &[16], Init::TruncNormal { std: 0.02 }, true).unwrap();
        assert_eq!(ta.to_vec1::<f64>().unwrap(), tb.to_vec1::<f64>().unwrap());
    }

    #[test]
    fn metadata_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.safetensors");
        let mut store = f64_store(1);
        store.get("w", &[2], Init::Ones, true).unwrap();
        let mut meta = HashMap::new();
        meta.insert("config".to_string(), "{\"lr\":1e-5}".to_string());
        store.save(&path, Some(meta)).unwrap();
        let read = read_metadata(&path).unwrap();
        assert_eq!(read.get("config").unwrap(), "{\"lr\":1e-5}");
    }
}
