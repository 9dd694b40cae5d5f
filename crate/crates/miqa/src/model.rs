//! End-to-end quality model: two backbones, the fusion path, and the
//! two-branch regressor, with every ablation axis wired through flags.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneSpec, BuiltBackbone, StageFeatures};
use crate::error::{Error, Result};
use crate::fusion::{channel_descriptor, concat_stage, FusedVectors, FusionConfig, FusionModule};
use crate::regressor::{Regressor, RegressorConfig};
use crate::store::ParamStore;

/// Numeric precision the model runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Structural on/off switches mirroring the ablation axes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Residual-convolutional backbone.
    #[serde(default = "default_true")]
    pub use_rm: bool,
    /// Windowed-attention backbone.
    #[serde(default = "default_true")]
    pub use_stm: bool,
    /// Multi-scale fusion path; when off, stage-4 descriptors feed the
    /// regressor directly.
    #[serde(default = "default_true")]
    pub use_msffm: bool,
    /// Weight branch of the regressor; when off the prediction is the raw
    /// score branch output.
    #[serde(default = "default_true")]
    pub use_srm_weight_branch: bool,
    /// 1-based stage indices feeding the multi-scale path; must be
    /// contiguous from 1.
    #[serde(default = "default_stages")]
    pub stages_enabled: Vec<usize>,
}

fn default_true() -> bool {
    true
}

fn default_stages() -> Vec<usize> {
    vec![1, 2, 3, 4]
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_rm: true,
            use_stm: true,
            use_msffm: true,
            use_srm_weight_branch: true,
            stages_enabled: default_stages(),
        }
    }
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if !self.use_rm && !self.use_stm {
            return Err(Error::Config("at least one backbone must be enabled".into()));
        }
        if self.stages_enabled.is_empty() {
            return Err(Error::Config("stages_enabled must not be empty".into()));
        }
        let want: Vec<usize> = (1..=self.stages_enabled.len()).collect();
        if self.stages_enabled != want {
            return Err(Error::Config(format!(
                "stages_enabled must be contiguous from 1, got {:?}",
                self.stages_enabled
            )));
        }
        Ok(())
    }
}

/// Per-channel input normalization constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_resolution")]
    pub input_resolution: usize,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default = "BackboneSpec::residual50")]
    pub residual: BackboneSpec,
    #[serde(default = "BackboneSpec::windowed_tiny")]
    pub windowed: BackboneSpec,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub regressor: RegressorConfig,
    #[serde(default)]
    pub ablation: AblationFlags,
    /// Normalization constants bundled with pretrained checkpoints; toy
    /// setups use the identity (None).
    #[serde(default)]
    pub normalization: Option<Normalization>,
}

fn default_resolution() -> usize {
    224
}

fn default_precision() -> Precision {
    Precision::F32
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_resolution: default_resolution(),
            precision: default_precision(),
            residual: BackboneSpec::residual50(),
            windowed: BackboneSpec::windowed_tiny(),
            fusion: FusionConfig::default(),
            regressor: RegressorConfig::default(),
            ablation: AblationFlags::default(),
            normalization: None,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration: toy backbones at a small resolution with a
    /// matching narrow fusion width, in 64-bit precision.
    pub fn toy(input_resolution: usize) -> Self {
        Self {
            input_resolution,
            precision: Precision::F64,
            residual: BackboneSpec::toy_residual(),
            windowed: BackboneSpec::toy_windowed(),
            fusion: FusionConfig {
                reduced_dim: 8,
                pool_kernel: 2,
            },
            regressor: RegressorConfig {
                hidden: 32,
                leaky_slope: 0.01,
            },
            ablation: AblationFlags::default(),
            normalization: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_resolution == 0 || self.input_resolution % 32 != 0 {
            return Err(Error::Config(format!(
                "input_resolution must be a positive multiple of 32, got {}",
                self.input_resolution
            )));
        }
        self.ablation.validate()?;
        if self.ablation.use_rm {
            self.residual.validate()?;
        }
        if self.ablation.use_stm {
            self.windowed.validate()?;
        }
        Ok(())
    }

    /// Fused channel count of 1-based stage `i` under the current flags.
    pub fn fused_channels(&self, stage: usize) -> usize {
        let mut c = 0;
        if self.ablation.use_rm {
            c += self.residual.channels()[stage - 1];
        }
        if self.ablation.use_stm {
            c += self.windowed.channels()[stage - 1];
        }
        c
    }

    /// Channel width of the final-stage path feeding the score branch.
    pub fn fs_channels(&self) -> usize {
        if self.ablation.use_stm {
            self.windowed.channels()[3]
        } else {
            self.residual.channels()[3]
        }
    }
}

/// Everything the forward pass produces, kept for inspection / export.
pub struct ForwardDetail {
    /// Fused per-stage maps in enabled-stage order (1-based index, tensor).
    pub fused_stages: Vec<(usize, Tensor)>,
    pub f_w: Tensor,
    pub f_s: Tensor,
    pub score: Tensor,
}

pub struct Model {
    cfg: ModelConfig,
    residual: Option<BuiltBackbone>,
    windowed: Option<BuiltBackbone>,
    fusion: Option<FusionModule>,
    regressor: Regressor,
    f_w_width: usize,
    f_s_width: usize,
}

impl Model {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let residual = if cfg.ablation.use_rm {
            Some(BuiltBackbone::build(&cfg.residual, cfg.input_resolution, store, "rm")?)
        } else {
            None
        };
        let windowed = if cfg.ablation.use_stm {
            Some(BuiltBackbone::build(&cfg.windowed, cfg.input_resolution, store, "stm")?)
        } else {
            None
        };

        let fs_width_in = cfg.fs_channels();
        let (fusion, f_w_width, f_s_width) = if cfg.ablation.use_msffm {
            let fused: Vec<(usize, usize)> = cfg
                .ablation
                .stages_enabled
                .iter()
                .map(|&i| (i, cfg.fused_channels(i)))
                .collect();
            let module = FusionModule::new(store, cfg.fusion, &fused, fs_width_in)?;
            let (w, s) = module.output_widths();
            (Some(module), w, s)
        } else {
            (None, cfg.fused_channels(4), fs_width_in)
        };

        let weight_in = cfg.ablation.use_srm_weight_branch.then_some(f_w_width);
        let regressor = Regressor::new(store, cfg.regressor, f_s_width, weight_in)?;
        Ok(Self {
            cfg: cfg.clone(),
            residual,
            windowed,
            fusion,
            regressor,
            f_w_width,
            f_s_width,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// (len f_w, len f_s) as seen by the regressor.
    pub fn vector_widths(&self) -> (usize, usize) {
        (self.f_w_width, self.f_s_width)
    }

    pub fn regressor(&self) -> &Regressor {
        &self.regressor
    }

    fn extract(&self, img: &Tensor, train: bool) -> Result<(Option<StageFeatures>, Option<StageFeatures>)> {
        let res = self
            .residual
            .as_ref()
            .map(|b| b.extract_stages(img, train))
            .transpose()?;
        let win = self
            .windowed
            .as_ref()
            .map(|b| b.extract_stages(img, train))
            .transpose()?;
        if let (Some(a), Some(b)) = (&res, &win) {
            a.assert_aligned(b)?;
        }
        Ok((res, win))
    }

    fn fused_stage(
        &self,
        res: &Option<StageFeatures>,
        win: &Option<StageFeatures>,
        stage: usize,
    ) -> Result<Tensor> {
        match (res, win) {
            (Some(r), Some(w)) => concat_stage(r.stage(stage), w.stage(stage)),
            (Some(r), None) => Ok(r.stage(stage).clone()),
            (None, Some(w)) => Ok(w.stage(stage).clone()),
            (None, None) => Err(Error::Config("no backbone enabled".into())),
        }
    }

    /// Full forward pass keeping intermediate tensors. `train` switches the
    /// backbones (batch-norm statistics) between batch and running stats.
    pub fn forward_detail(&self, img: &Tensor, train: bool) -> Result<ForwardDetail> {
        let (res, win) = self.extract(img, train)?;
        let fs_source = match (&win, &res) {
            (Some(w), _) => w.stage(4).clone(),
            (None, Some(r)) => r.stage(4).clone(),
            _ => unreachable!("validated at construction"),
        };

        let (fused_stages, vectors) = match &self.fusion {
            Some(fusion) => {
                let mut stages = Vec::new();
                for &i in &self.cfg.ablation.stages_enabled {
                    stages.push((i, self.fused_stage(&res, &win, i)?));
                }
                let tensors: Vec<Tensor> = stages.iter().map(|(_, t)| t.clone()).collect();
                let v = fusion.forward(&tensors, &fs_source)?;
                (stages, v)
            }
            None => {
                // fusion disabled: stage-4 descriptors go straight through
                let stage4 = self.fused_stage(&res, &win, 4)?;
                let f_w = channel_descriptor(&stage4, None)?;
                let f_s = channel_descriptor(&fs_source, None)?;
                (vec![(4, stage4)], FusedVectors { f_w, f_s })
            }
        };

        let score = self.regressor.predict(&vectors.f_w, &vectors.f_s)?;
        Ok(ForwardDetail {
            fused_stages,
            f_w: vectors.f_w,
            f_s: vectors.f_s,
            score,
        })
    }

    /// Quality scores for a batch of images, shape (batch,).
    pub fn forward(&self, img: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.forward_detail(img, train)?.score)
    }
}
