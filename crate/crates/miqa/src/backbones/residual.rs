//! Residual-convolutional feature extractors: the 50-layer bottleneck
//! network and a four-stage toy stand-in with the same spatial contract.

use candle_core::{Module, Tensor};
use candle_nn::Conv2d;

use crate::error::Result;
use crate::layers::{self, BatchNorm2d};
use crate::store::ParamStore;

struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    down: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_ch: usize,
        width: usize,
        out_ch: usize,
        stride: usize,
    ) -> Result<Self> {
        let conv1 = layers::conv2d(store, &format!("{prefix}.conv1"), in_ch, width, 1, 1, 0, false)?;
        let bn1 = BatchNorm2d::new(store, &format!("{prefix}.bn1"), width)?;
        let conv2 = layers::conv2d(store, &format!("{prefix}.conv2"), width, width, 3, stride, 1, false)?;
        let bn2 = BatchNorm2d::new(store, &format!("{prefix}.bn2"), width)?;
        let conv3 = layers::conv2d(store, &format!("{prefix}.conv3"), width, out_ch, 1, 1, 0, false)?;
        let bn3 = BatchNorm2d::new(store, &format!("{prefix}.bn3"), out_ch)?;
        let down = if stride != 1 || in_ch != out_ch {
            let conv = layers::conv2d(store, &format!("{prefix}.down.conv"), in_ch, out_ch, 1, stride, 0, false)?;
            let bn = BatchNorm2d::new(store, &format!("{prefix}.down.bn"), out_ch)?;
            Some((conv, bn))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            conv3,
            bn3,
            down,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, train)?.relu()?;
        let h = self.bn3.forward(&self.conv3.forward(&h)?, train)?;
        let skip = match &self.down {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

/// 50-layer bottleneck network; stages emit 256/512/1024/2048 channels at
/// 1/4 .. 1/32 of the input resolution.
pub struct ResNet50 {
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<Bottleneck>>,
}

impl ResNet50 {
    pub fn new(store: &mut ParamStore, prefix: &str) -> Result<Self> {
        let stem_conv = layers::conv2d(store, &format!("{prefix}.stem.conv"), 3, 64, 7, 2, 3, false)?;
        let stem_bn = BatchNorm2d::new(store, &format!("{prefix}.stem.bn"), 64)?;
        let widths = [64usize, 128, 256, 512];
        let depths = [3usize, 4, 6, 3];
        let strides = [1usize, 2, 2, 2];
        let mut stages = Vec::new();
        let mut in_ch = 64;
        for s in 0..4 {
            let out_ch = widths[s] * 4;
            let mut blocks = Vec::new();
            for b in 0..depths[s] {
                let stride = if b == 0 { strides[s] } else { 1 };
                blocks.push(Bottleneck::new(
                    store,
                    &format!("{prefix}.stage{}.block{b}", s + 1),
                    in_ch,
                    widths[s],
                    out_ch,
                    stride,
                )?);
                in_ch = out_ch;
            }
            stages.push(blocks);
        }
        Ok(Self {
            stem_conv,
            stem_bn,
            stages,
        })
    }

    pub fn forward(&self, img: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let x = self.stem_bn.forward(&self.stem_conv.forward(img)?, train)?.relu()?;
        // 3x3/2 max pool with padding 1; zero padding is safe post-relu
        let x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut x = x.max_pool2d_with_stride(3, 2)?;
        let mut outputs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x, train)?;
            }
            outputs.push(x.clone());
        }
        Ok(outputs)
    }
}

struct ToyResStage {
    down: Conv2d,
    refine: Conv2d,
}

/// Toy residual extractor: one strided conv plus one residual refinement per
/// stage, smooth activations throughout so finite-difference checks behave.
pub struct ToyResidual {
    stem: Conv2d,
    stages: Vec<ToyResStage>,
}

impl ToyResidual {
    pub fn new(store: &mut ParamStore, prefix: &str, stage_channels: &[usize; 4]) -> Result<Self> {
        let stem = layers::conv2d(store, &format!("{prefix}.stem.conv"), 3, stage_channels[0], 4, 4, 0, true)?;
        let mut stages = Vec::new();
        let mut in_ch = stage_channels[0];
        for (i, &out_ch) in stage_channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let down = layers::conv2d(
                store,
                &format!("{prefix}.stage{}.down", i + 1),
                in_ch,
                out_ch,
                3,
                stride,
                1,
                true,
            )?;
            let refine = layers::conv2d(
                store,
                &format!("{prefix}.stage{}.refine", i + 1),
                out_ch,
                out_ch,
                3,
                1,
                1,
                true,
            )?;
            stages.push(ToyResStage { down, refine });
            in_ch = out_ch;
        }
        Ok(Self { stem, stages })
    }

    pub fn forward(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = self.stem.forward(img)?.silu()?;
        let mut outputs = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.down.forward(&x)?.silu()?;
            x = (&x + stage.refine.forward(&x)?.silu()?)?;
            outputs.push(x.clone());
        }
        Ok(outputs)
    }
}
