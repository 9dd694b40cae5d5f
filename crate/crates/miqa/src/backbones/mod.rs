//! Dual-family multi-scale feature extraction.
//!
//! Every backbone emits exactly four feature stacks; stage `i` (1-based) has
//! spatial size `input / 2^(i+1)`, so a 224 input yields 56/28/14/7 grids.
//! Two backbones built for the same resolution are therefore pairwise
//! aligned at every stage, which is what the fusion path relies on.

mod residual;
mod windowed;

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use residual::{ResNet50, ToyResidual};
pub use windowed::{SwinTiny, ToyWindowed};

use crate::error::{Error, Result};
use crate::store::{LoadReport, ParamStore};

/// Architecture family of a feature extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Residual50,
    WindowedTiny,
    ToyResidual,
    ToyWindowed,
}

impl BackboneKind {
    pub fn canonical_channels(self) -> Option<[usize; 4]> {
        match self {
            BackboneKind::Residual50 => Some([256, 512, 1024, 2048]),
            BackboneKind::WindowedTiny => Some([96, 192, 384, 768]),
            _ => None,
        }
    }

    pub fn default_channels(self) -> [usize; 4] {
        match self {
            BackboneKind::Residual50 => [256, 512, 1024, 2048],
            BackboneKind::WindowedTiny => [96, 192, 384, 768],
            BackboneKind::ToyResidual => [8, 16, 32, 64],
            BackboneKind::ToyWindowed => [4, 8, 16, 32],
        }
    }

    /// Parameter prefix shared with full-model checkpoints.
    pub fn family_prefix(self) -> &'static str {
        match self {
            BackboneKind::Residual50 | BackboneKind::ToyResidual => "rm",
            BackboneKind::WindowedTiny | BackboneKind::ToyWindowed => "stm",
        }
    }
}

/// Declared shape contract of one backbone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    #[serde(default)]
    pub stage_channels: Option<[usize; 4]>,
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
}

impl BackboneSpec {
    pub fn new(kind: BackboneKind) -> Self {
        Self {
            kind,
            stage_channels: None,
            checkpoint_path: None,
        }
    }

    pub fn residual50() -> Self {
        Self::new(BackboneKind::Residual50)
    }

    pub fn windowed_tiny() -> Self {
        Self::new(BackboneKind::WindowedTiny)
    }

    pub fn toy_residual() -> Self {
        Self::new(BackboneKind::ToyResidual)
    }

    pub fn toy_windowed() -> Self {
        Self::new(BackboneKind::ToyWindowed)
    }

    /// Effective per-stage channel counts.
    pub fn channels(&self) -> [usize; 4] {
        self.stage_channels.unwrap_or_else(|| self.kind.default_channels())
    }

    pub fn validate(&self) -> Result<()> {
        let channels = self.channels();
        if channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage channels must be positive".into()));
        }
        if let Some(canonical) = self.kind.canonical_channels() {
            if channels != canonical {
                return Err(Error::Config(format!(
                    "{:?} has fixed stage channels {:?}, got {:?}",
                    self.kind, canonical, channels
                )));
            }
        }
        Ok(())
    }
}

/// The four per-stage feature tensors produced by one backbone.
pub struct StageFeatures {
    stages: Vec<Tensor>,
}

impl StageFeatures {
    pub fn new(stages: Vec<Tensor>) -> Result<Self> {
        if stages.len() != 4 {
            return Err(Error::shape("StageFeatures", 4, stages.len()));
        }
        Ok(Self { stages })
    }

    pub fn stage(&self, index_1based: usize) -> &Tensor {
        &self.stages[index_1based - 1]
    }

    pub fn stages(&self) -> &[Tensor] {
        &self.stages
    }

    pub fn channels(&self) -> Result<[usize; 4]> {
        let mut out = [0usize; 4];
        for (i, t) in self.stages.iter().enumerate() {
            out[i] = t.dim(1)?;
        }
        Ok(out)
    }

    pub fn spatial(&self) -> Result<[(usize, usize); 4]> {
        let mut out = [(0usize, 0usize); 4];
        for (i, t) in self.stages.iter().enumerate() {
            let (_, _, h, w) = t.dims4()?;
            out[i] = (h, w);
        }
        Ok(out)
    }

    /// Check the pairwise spatial alignment required for channel fusion.
    pub fn assert_aligned(&self, other: &StageFeatures) -> Result<()> {
        let a = self.spatial()?;
        let b = other.spatial()?;
        if a != b {
            return Err(Error::shape("stage alignment", format!("{a:?}"), format!("{b:?}")));
        }
        Ok(())
    }
}

/// Re-layout a token sequence (batch, H*W, C) into a channel-first map
/// (batch, C, H, W). The token count must be a perfect square.
pub fn token_grid_to_channel_first(tokens: &Tensor) -> Result<Tensor> {
    let (b, l, c) = tokens.dims3()?;
    let side = (l as f64).sqrt().round() as usize;
    if side * side != l {
        return Err(Error::shape(
            "token_grid_to_channel_first",
            "a square token count",
            format!("{l} tokens"),
        ));
    }
    Ok(tokens.transpose(1, 2)?.contiguous()?.reshape((b, c, side, side))?)
}

/// Inverse of [`token_grid_to_channel_first`].
pub fn channel_first_to_token_grid(map: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = map.dims4()?;
    Ok(map.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// A built feature extractor bound to one input resolution.
pub enum Backbone {
    Residual50(ResNet50),
    WindowedTiny(SwinTiny),
    ToyResidual(ToyResidual),
    ToyWindowed(ToyWindowed),
}

pub struct BuiltBackbone {
    net: Backbone,
    spec: BackboneSpec,
    resolution: usize,
}

impl BuiltBackbone {
    pub fn build(spec: &BackboneSpec, resolution: usize, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        spec.validate()?;
        if resolution == 0 || resolution % 32 != 0 {
            return Err(Error::Config(format!(
                "input resolution must be a positive multiple of 32, got {resolution}"
            )));
        }
        let net = match spec.kind {
            BackboneKind::Residual50 => Backbone::Residual50(ResNet50::new(store, prefix)?),
            BackboneKind::WindowedTiny => Backbone::WindowedTiny(SwinTiny::new(store, prefix, resolution)?),
            BackboneKind::ToyResidual => Backbone::ToyResidual(ToyResidual::new(store, prefix, &spec.channels())?),
            BackboneKind::ToyWindowed => Backbone::ToyWindowed(ToyWindowed::new(store, prefix, &spec.channels())?),
        };
        Ok(Self {
            net,
            spec: spec.clone(),
            resolution,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    fn validate_input(&self, img: &Tensor) -> Result<()> {
        let (_, c, h, w) = img.dims4().map_err(|_| {
            Error::shape("extract_stages", "rank-4 (batch, 3, H, W) input", format!("{:?}", img.dims()))
        })?;
        if c != 3 {
            return Err(Error::shape("extract_stages", "3 input channels", c));
        }
        if h != w {
            return Err(Error::shape("extract_stages", "square input", format!("{h}x{w}")));
        }
        if h % 32 != 0 {
            return Err(Error::shape("extract_stages", "H and W divisible by 32", format!("{h}x{w}")));
        }
        if h != self.resolution {
            return Err(Error::shape(
                "extract_stages",
                format!("the built resolution {}", self.resolution),
                format!("{h}"),
            ));
        }
        Ok(())
    }

    /// Run the extractor and check the stage contract on the way out.
    pub fn extract_stages(&self, img: &Tensor, train: bool) -> Result<StageFeatures> {
        self.validate_input(img)?;
        let raw = match &self.net {
            Backbone::Residual50(net) => net.forward(img, train)?,
            Backbone::WindowedTiny(net) => net.forward(img)?,
            Backbone::ToyResidual(net) => net.forward(img)?,
            Backbone::ToyWindowed(net) => net.forward(img)?,
        };
        let features = StageFeatures::new(raw)?;
        let channels = features.channels()?;
        let expected = self.spec.channels();
        if channels != expected {
            return Err(Error::shape("extract_stages channels", format!("{expected:?}"), format!("{channels:?}")));
        }
        let spatial = features.spatial()?;
        for (i, &(h, w)) in spatial.iter().enumerate() {
            let want = self.resolution >> (i + 2);
            if (h, w) != (want, want) {
                return Err(Error::shape(
                    format!("stage {} spatial size", i + 1),
                    format!("{want}x{want}"),
                    format!("{h}x{w}"),
                ));
            }
        }
        Ok(features)
    }
}

/// Build a backbone from `spec` and overwrite its parameters from a
/// checkpoint file, reporting missing / unexpected tensor names.
pub fn load_backbone_weights(
    spec: &BackboneSpec,
    resolution: usize,
    dtype: DType,
    device: &Device,
    path: &Path,
) -> Result<(BuiltBackbone, ParamStore, LoadReport)> {
    let mut store = ParamStore::new(dtype, device.clone(), 0);
    let backbone = BuiltBackbone::build(spec, resolution, &mut store, spec.kind.family_prefix())?;
    let report = store.load(path)?;
    Ok((backbone, store, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    const DEV: Device = Device::Cpu;

    fn store(dtype: DType, seed: u64) -> ParamStore {
        ParamStore::new(dtype, DEV, seed)
    }

    #[test]
    fn token_mapping_indices() {
        let tokens = Tensor::from_vec(
            (0..8).map(|v| v as f64).collect::<Vec<_>>(),
            (1, 4, 2),
            &DEV,
        )
        .unwrap();
        let map = token_grid_to_channel_first(&tokens).unwrap();
        assert_eq!(map.dims(), &[1, 2, 2, 2]);
        // token (h*W + w) stores channel pair (2*(h*W+w), 2*(h*W+w)+1)
        for h in 0..2usize {
            for w in 0..2usize {
                for c in 0..2usize {
                    let got = map
                        .get(0).unwrap()
                        .get(c).unwrap()
                        .get(h).unwrap()
                        .get(w).unwrap()
                        .to_scalar::<f64>()
                        .unwrap();
                    let expect = ((h * 2 + w) * 2 + c) as f64;
                    assert_eq!(got, expect);
                }
            }
        }
    }

    #[test]
    fn token_round_trip_is_identity() {
        let mut vals = Vec::new();
        for i in 0..(2 * 9 * 5) {
            vals.push((i as f64 * 0.37).sin());
        }
        let tokens = Tensor::from_vec(vals.clone(), (2, 9, 5), &DEV).unwrap();
        let back = channel_first_to_token_grid(&token_grid_to_channel_first(&tokens).unwrap()).unwrap();
        assert_eq!(back.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vals);
    }

    #[test]
    fn non_square_token_count_is_rejected() {
        let tokens = Tensor::zeros((1, 5, 2), DType::F64, &DEV).unwrap();
        assert!(token_grid_to_channel_first(&tokens).is_err());
    }

    #[test]
    fn toy_backbones_share_the_spatial_contract() {
        let mut s = store(DType::F64, 1);
        let res = BuiltBackbone::build(&BackboneSpec::toy_residual(), 64, &mut s, "rm").unwrap();
        let win = BuiltBackbone::build(&BackboneSpec::toy_windowed(), 64, &mut s, "stm").unwrap();
        let img = Tensor::zeros((1, 3, 64, 64), DType::F64, &DEV).unwrap();
        let a = res.extract_stages(&img, false).unwrap();
        let b = win.extract_stages(&img, false).unwrap();
        a.assert_aligned(&b).unwrap();
        assert_eq!(a.channels().unwrap(), [8, 16, 32, 64]);
        assert_eq!(b.channels().unwrap(), [4, 8, 16, 32]);
        assert_eq!(a.spatial().unwrap(), [(16, 16), (8, 8), (4, 4), (2, 2)]);
    }

    #[test]
    fn extract_rejects_bad_input_shapes() {
        let mut s = store(DType::F64, 1);
        let bb = BuiltBackbone::build(&BackboneSpec::toy_residual(), 64, &mut s, "rm").unwrap();
        for dims in [
            vec![1usize, 3, 60, 60], // not divisible by 32
            vec![1, 3, 64, 32],      // not square
            vec![1, 1, 64, 64],      // wrong channel count
            vec![1, 3, 96, 96],      // disagrees with built resolution
        ] {
            let img = Tensor::zeros(dims.as_slice(), DType::F64, &DEV).unwrap();
            assert!(bb.extract_stages(&img, false).is_err(), "{dims:?} should fail");
        }
    }

    #[test]
    fn named_kinds_pin_their_channel_vectors() {
        let mut spec = BackboneSpec::residual50();
        spec.stage_channels = Some([1, 2, 3, 4]);
        assert!(spec.validate().is_err());
        let mut spec = BackboneSpec::toy_residual();
        spec.stage_channels = Some([2, 4, 8, 16]);
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn extraction_is_deterministic() {
        let mut s = store(DType::F64, 9);
        let bb = BuiltBackbone::build(&BackboneSpec::toy_windowed(), 64, &mut s, "stm").unwrap();
        let img = Tensor::from_vec(
            (0..3 * 64 * 64).map(|i| ((i as f64) * 0.013).sin().abs()).collect::<Vec<_>>(),
            (1, 3, 64, 64),
            &DEV,
        )
        .unwrap();
        let a = bb.extract_stages(&img, false).unwrap();
        let b = bb.extract_stages(&img, false).unwrap();
        for (x, y) in a.stages().iter().zip(b.stages()) {
            let xv = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let yv = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert_eq!(xv, yv);
        }
    }

    #[test]
    fn zero_image_produces_finite_stages() {
        let mut s = store(DType::F64, 3);
        for spec in [BackboneSpec::toy_residual(), BackboneSpec::toy_windowed()] {
            let bb = BuiltBackbone::build(&spec, 64, &mut s, spec.kind.family_prefix()).unwrap();
            let img = Tensor::zeros((1, 3, 64, 64), DType::F64, &DEV).unwrap();
            let feats = bb.extract_stages(&img, false).unwrap();
            for t in feats.stages() {
                let v = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
                assert!(v.iter().all(|x| x.is_finite()), "non-finite output for {:?}", spec.kind);
            }
        }
    }

    #[test]
    fn backbone_checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.safetensors");
        let mut s = store(DType::F64, 17);
        let spec = BackboneSpec::toy_residual();
        BuiltBackbone::build(&spec, 64, &mut s, "rm").unwrap();
        s.save(&path, None).unwrap();

        let (_, loaded, report) = load_backbone_weights(&spec, 64, DType::F64, &DEV, &path).unwrap();
        assert!(report.is_exact());
        for name in s.names() {
            let a = s.tensor(name).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let b = loaded.tensor(name).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert_eq!(a, b, "{name} not bit-exact");
        }

        // loading a residual checkpoint into the windowed family fails
        let err = load_backbone_weights(&BackboneSpec::toy_windowed(), 64, DType::F64, &DEV, &path);
        assert!(err.is_err());

        // an extra tensor is reported, not fatal
        let mut extra = store(DType::F64, 18);
        BuiltBackbone::build(&spec, 64, &mut extra, "rm").unwrap();
        extra.get("rm.unused.scratch", &[3], crate::store::Init::Ones, true).unwrap();
        let extra_path = dir.path().join("extra.safetensors");
        extra.save(&extra_path, None).unwrap();
        let (_, _, report) = load_backbone_weights(&spec, 64, DType::F64, &DEV, &extra_path).unwrap();
        assert_eq!(report.unexpected, vec!["rm.unused.scratch".to_string()]);
        assert!(report.missing.is_empty());
    }
}
