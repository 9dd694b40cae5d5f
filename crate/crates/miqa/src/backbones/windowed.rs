//! Windowed-attention feature extractors: a tiny-scale hierarchical
//! shifted-window transformer and a toy single-block-per-stage variant.
//!
//! Both emit token sequences internally; stage outputs are re-laid-out to
//! channel-first maps via [`token_grid_to_channel_first`](super::token_grid_to_channel_first)
//! so the fusion path sees the same format from either backbone family.

use candle_core::{IndexOp, Module, Tensor, D};
use candle_nn::{Conv2d, LayerNorm, Linear};

use crate::error::Result;
use crate::layers;
use crate::store::{Init, ParamStore};

use super::channel_first_to_token_grid;
use super::token_grid_to_channel_first;

/// Flat relative-position index of a square window, row-major over pairs.
fn relative_position_index(window: usize) -> Vec<u32> {
    let n = window * window;
    let w = window as i64;
    let mut out = Vec::with_capacity(n * n);
    for a in 0..n as i64 {
        for b in 0..n as i64 {
            let dy = a / w - b / w + w - 1;
            let dx = a % w - b % w + w - 1;
            out.push((dy * (2 * w - 1) + dx) as u32);
        }
    }
    out
}

/// Region labels of the shifted-window mask, built on the (padded) grid.
/// Window pairs from different regions get a large negative logit bias.
fn build_shift_mask(res: usize, window: usize, shift: usize) -> Vec<Vec<i32>> {
    let region = |v: usize| -> i32 {
        if v < res - window {
            0
        } else if v < res - shift {
            1
        } else {
            2
        }
    };
    let per_side = res / window;
    let n = window * window;
    let mut windows = vec![vec![0i32; n]; per_side * per_side];
    for y in 0..res {
        for x in 0..res {
            let id = region(y) * 3 + region(x);
            let wy = y / window;
            let wx = x / window;
            let iy = y % window;
            let ix = x % window;
            windows[wy * per_side + wx][iy * window + ix] = id;
        }
    }
    windows
}

fn shift_mask_tensor(res: usize, window: usize, shift: usize, store: &ParamStore) -> Result<Tensor> {
    let windows = build_shift_mask(res, window, shift);
    let n = window * window;
    let mut values = Vec::with_capacity(windows.len() * n * n);
    for ids in &windows {
        for i in 0..n {
            for j in 0..n {
                values.push(if ids[i] == ids[j] { 0.0f64 } else { -100.0 });
            }
        }
    }
    Ok(Tensor::from_vec(values, (windows.len(), n, n), store.device())?.to_dtype(store.dtype())?)
}

struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    bias_table: Tensor,
    bias_index: Tensor,
    heads: usize,
    head_dim: usize,
    window: usize,
}

impl WindowAttention {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, window: usize) -> Result<Self> {
        let qkv = layers::linear_trunc(store, &format!("{prefix}.qkv"), dim, dim * 3)?;
        let proj = layers::linear_trunc(store, &format!("{prefix}.proj"), dim, dim)?;
        let table_len = (2 * window - 1) * (2 * window - 1);
        let bias_table = store.get(
            &format!("{prefix}.bias_table"),
            &[table_len, heads],
            Init::TruncNormal { std: 0.02 },
            true,
        )?;
        let bias_index = Tensor::from_vec(
            relative_position_index(window),
            (window * window * window * window,),
            store.device(),
        )?;
        Ok(Self {
            qkv,
            proj,
            bias_table,
            bias_index,
            heads,
            head_dim: dim / heads,
            window,
        })
    }

    /// `x` is (batch * windows, tokens, dim); `mask` is (windows, tokens, tokens).
    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (bn, n, c) = x.dims3()?;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((bn, n, 3, self.heads, self.head_dim))?
            .permute((2, 0, 3, 1, 4))?
            .contiguous()?;
        let q = qkv.i(0)?;
        let k = qkv.i(1)?;
        let v = qkv.i(2)?;
        let scale = (self.head_dim as f64).powf(-0.5);
        let attn = (q.matmul(&k.transpose(D::Minus2, D::Minus1)?)? * scale)?;

        let n_tok = self.window * self.window;
        let bias = self
            .bias_table
            .index_select(&self.bias_index, 0)?
            .reshape((n_tok, n_tok, self.heads))?
            .permute((2, 0, 1))?
            .contiguous()?
            .unsqueeze(0)?;
        let attn = attn.broadcast_add(&bias)?;

        let attn = match mask {
            Some(mask) => {
                let n_windows = mask.dim(0)?;
                let batch = bn / n_windows;
                let attn = attn.reshape((batch, n_windows, self.heads, n, n))?;
                let mask = mask.unsqueeze(0)?.unsqueeze(2)?;
                attn.broadcast_add(&mask)?.reshape((bn, self.heads, n, n))?
            }
            None => attn,
        };
        let attn = candle_nn::ops::softmax(&attn, D::Minus1)?;
        let out = attn.matmul(&v.contiguous()?)?;
        let out = out.transpose(1, 2)?.contiguous()?.reshape((bn, n, c))?;
        Ok(self.proj.forward(&out)?)
    }
}

fn window_partition(x: &Tensor, window: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let x = x.reshape((b, h / window, window, w / window, window, c))?;
    let x = x.permute((0, 1, 3, 2, 4, 5))?.contiguous()?;
    Ok(x.reshape(((), window * window, c))?)
}

fn window_reverse(x: &Tensor, window: usize, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, c) = x.dims3()?;
    let x = x.reshape(((), h / window, w / window, window, window, c))?;
    let x = x.permute((0, 1, 3, 2, 4, 5))?.contiguous()?;
    Ok(x.reshape(((), h, w, c))?)
}

struct SwinBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    mlp_fc1: Linear,
    mlp_fc2: Linear,
    resolution: usize,
    window: usize,
    shift: usize,
    attn_mask: Option<Tensor>,
}

impl SwinBlock {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        resolution: usize,
        window: usize,
        shifted: bool,
        mlp_ratio: usize,
    ) -> Result<Self> {
        // shrink the window (and drop the shift) once it covers the grid
        let window = window.min(resolution);
        let shift = if shifted && window < resolution { window / 2 } else { 0 };
        let padded = resolution.div_ceil(window) * window;

        let norm1 = layers::layer_norm(store, &format!("{prefix}.norm1"), dim)?;
        let attn = WindowAttention::new(store, &format!("{prefix}.attn"), dim, heads, window)?;
        let norm2 = layers::layer_norm(store, &format!("{prefix}.norm2"), dim)?;
        let mlp_fc1 = layers::linear_trunc(store, &format!("{prefix}.mlp.fc1"), dim, dim * mlp_ratio)?;
        let mlp_fc2 = layers::linear_trunc(store, &format!("{prefix}.mlp.fc2"), dim * mlp_ratio, dim)?;
        let attn_mask = if shift > 0 {
            Some(shift_mask_tensor(padded, window, shift, store)?)
        } else {
            None
        };
        Ok(Self {
            norm1,
            attn,
            norm2,
            mlp_fc1,
            mlp_fc2,
            resolution,
            window,
            shift,
            attn_mask,
        })
    }

    /// `x` is (batch, tokens, dim) on a square `resolution` grid.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, c) = x.dims3()?;
        let r = self.resolution;
        debug_assert_eq!(l, r * r);
        let shortcut = x;
        let h = self.norm1.forward(x)?.reshape((b, r, r, c))?;

        let padded = r.div_ceil(self.window) * self.window;
        let h = if padded != r {
            h.pad_with_zeros(1, 0, padded - r)?.pad_with_zeros(2, 0, padded - r)?
        } else {
            h
        };
        let h = if self.shift > 0 {
            h.roll(-(self.shift as i32), 1)?.roll(-(self.shift as i32), 2)?
        } else {
            h
        };
        let windows = window_partition(&h, self.window)?;
        let attended = self.attn.forward(&windows, self.attn_mask.as_ref())?;
        let h = window_reverse(&attended, self.window, padded, padded)?;
        let h = if self.shift > 0 {
            h.roll(self.shift as i32, 1)?.roll(self.shift as i32, 2)?
        } else {
            h
        };
        let h = if padded != r {
            h.narrow(1, 0, r)?.narrow(2, 0, r)?
        } else {
            h
        };
        let x = (shortcut + h.reshape((b, l, c))?)?;

        let m = self.norm2.forward(&x)?;
        let m = self.mlp_fc2.forward(&self.mlp_fc1.forward(&m)?.gelu_erf()?)?;
        Ok((x + m)?)
    }
}

struct PatchMerging {
    norm: LayerNorm,
    reduction: Linear,
}

impl PatchMerging {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let norm = layers::layer_norm(store, &format!("{prefix}.norm"), 4 * dim)?;
        let weight = store.get(
            &format!("{prefix}.reduction.weight"),
            &[2 * dim, 4 * dim],
            Init::TruncNormal { std: 0.02 },
            true,
        )?;
        Ok(Self {
            norm,
            reduction: Linear::new(weight, None),
        })
    }

    /// (batch, r*r, c) -> (batch, r*r/4, 2c)
    fn forward(&self, x: &Tensor, resolution: usize) -> Result<Tensor> {
        let (b, _, c) = x.dims3()?;
        let r = resolution;
        let x = x.reshape((b, r / 2, 2, r / 2, 2, c))?;
        let x00 = x.i((.., .., 0, .., 0, ..))?;
        let x10 = x.i((.., .., 1, .., 0, ..))?;
        let x01 = x.i((.., .., 0, .., 1, ..))?;
        let x11 = x.i((.., .., 1, .., 1, ..))?;
        let merged = Tensor::cat(&[&x00, &x10, &x01, &x11], D::Minus1)?.reshape((b, r * r / 4, 4 * c))?;
        Ok(self.reduction.forward(&self.norm.forward(&merged)?)?)
    }
}

struct SwinStage {
    blocks: Vec<SwinBlock>,
    merge: Option<PatchMerging>,
    resolution: usize,
}

/// Tiny-scale hierarchical shifted-window transformer: 4-stage token pyramid
/// with stage widths doubling from the embedding dim.
pub struct SwinTiny {
    patch_proj: Conv2d,
    patch_norm: LayerNorm,
    stages: Vec<SwinStage>,
}

pub(crate) const SWIN_TINY_EMBED: usize = 96;
const SWIN_TINY_DEPTHS: [usize; 4] = [2, 2, 6, 2];
const SWIN_TINY_HEADS: [usize; 4] = [3, 6, 12, 24];
const SWIN_WINDOW: usize = 7;
const SWIN_MLP_RATIO: usize = 4;

impl SwinTiny {
    pub fn new(store: &mut ParamStore, prefix: &str, resolution: usize) -> Result<Self> {
        let embed = SWIN_TINY_EMBED;
        let patch_proj = layers::conv2d(store, &format!("{prefix}.patch_embed.proj"), 3, embed, 4, 4, 0, true)?;
        let patch_norm = layers::layer_norm(store, &format!("{prefix}.patch_embed.norm"), embed)?;
        let mut stages = Vec::new();
        let mut res = resolution / 4;
        for s in 0..4 {
            let dim = embed << s;
            let mut blocks = Vec::new();
            for b in 0..SWIN_TINY_DEPTHS[s] {
                blocks.push(SwinBlock::new(
                    store,
                    &format!("{prefix}.stage{}.block{b}", s + 1),
                    dim,
                    SWIN_TINY_HEADS[s],
                    res,
                    SWIN_WINDOW,
                    b % 2 == 1,
                    SWIN_MLP_RATIO,
                )?);
            }
            let merge = if s < 3 {
                Some(PatchMerging::new(store, &format!("{prefix}.stage{}.merge", s + 1), dim)?)
            } else {
                None
            };
            stages.push(SwinStage {
                blocks,
                merge,
                resolution: res,
            });
            res /= 2;
        }
        Ok(Self {
            patch_proj,
            patch_norm,
            stages,
        })
    }

    pub fn forward(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        let embedded = self.patch_proj.forward(img)?;
        let mut x = self.patch_norm.forward(&channel_first_to_token_grid(&embedded)?)?;
        let mut outputs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in &stage.blocks {
                x = block.forward(&x)?;
            }
            outputs.push(token_grid_to_channel_first(&x)?);
            if let Some(merge) = &stage.merge {
                x = merge.forward(&x, stage.resolution)?;
            }
        }
        Ok(outputs)
    }
}

struct ToyAttnBlock {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    mlp_fc1: Linear,
    mlp_fc2: Linear,
}

impl ToyAttnBlock {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: layers::layer_norm(store, &format!("{prefix}.norm1"), dim)?,
            qkv: layers::linear_trunc(store, &format!("{prefix}.attn.qkv"), dim, dim * 3)?,
            proj: layers::linear_trunc(store, &format!("{prefix}.attn.proj"), dim, dim)?,
            norm2: layers::layer_norm(store, &format!("{prefix}.norm2"), dim)?,
            mlp_fc1: layers::linear_trunc(store, &format!("{prefix}.mlp.fc1"), dim, dim * 2)?,
            mlp_fc2: layers::linear_trunc(store, &format!("{prefix}.mlp.fc2"), dim * 2, dim)?,
        })
    }

    /// Single-head attention over the full token grid (window == grid).
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let h = self.norm1.forward(x)?;
        let qkv = self.qkv.forward(&h)?.reshape((b, n, 3, c))?.permute((2, 0, 1, 3))?.contiguous()?;
        let q = qkv.i(0)?;
        let k = qkv.i(1)?;
        let v = qkv.i(2)?;
        let attn = (q.matmul(&k.transpose(D::Minus2, D::Minus1)?)? * (c as f64).powf(-0.5))?;
        let attn = candle_nn::ops::softmax(&attn, D::Minus1)?;
        let attended = self.proj.forward(&attn.matmul(&v)?)?;
        let x = (x + attended)?;
        let m = self.norm2.forward(&x)?;
        let m = self.mlp_fc2.forward(&self.mlp_fc1.forward(&m)?.gelu_erf()?)?;
        Ok((x + m)?)
    }
}

struct ToyWinStage {
    block: ToyAttnBlock,
    merge: Option<Conv2d>,
}

/// Toy attention extractor: one global-window attention block per stage,
/// strided-conv merges between stages.
pub struct ToyWindowed {
    patch_proj: Conv2d,
    patch_norm: LayerNorm,
    stages: Vec<ToyWinStage>,
}

impl ToyWindowed {
    pub fn new(store: &mut ParamStore, prefix: &str, stage_channels: &[usize; 4]) -> Result<Self> {
        let patch_proj = layers::conv2d(
            store,
            &format!("{prefix}.patch_embed.proj"),
            3,
            stage_channels[0],
            4,
            4,
            0,
            true,
        )?;
        let patch_norm = layers::layer_norm(store, &format!("{prefix}.patch_embed.norm"), stage_channels[0])?;
        let mut stages = Vec::new();
        for (i, &dim) in stage_channels.iter().enumerate() {
            let block = ToyAttnBlock::new(store, &format!("{prefix}.stage{}.block", i + 1), dim)?;
            let merge = if i < 3 {
                Some(layers::conv2d(
                    store,
                    &format!("{prefix}.stage{}.merge", i + 1),
                    dim,
                    stage_channels[i + 1],
                    2,
                    2,
                    0,
                    true,
                )?)
            } else {
                None
            };
            stages.push(ToyWinStage { block, merge });
        }
        Ok(Self {
            patch_proj,
            patch_norm,
            stages,
        })
    }

    pub fn forward(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        let embedded = self.patch_proj.forward(img)?;
        let mut x = self.patch_norm.forward(&channel_first_to_token_grid(&embedded)?)?;
        let mut outputs = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.block.forward(&x)?;
            let map = token_grid_to_channel_first(&x)?;
            outputs.push(map.clone());
            if let Some(merge) = &stage.merge {
                x = channel_first_to_token_grid(&merge.forward(&map)?)?;
            }
        }
        Ok(outputs)
    }
}
