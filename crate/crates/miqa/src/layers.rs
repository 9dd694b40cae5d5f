//! Thin layer constructors wiring candle modules to the parameter store.

use candle_core::{Tensor, Var, D};
use candle_nn::{Conv2d, Conv2dConfig, LayerNorm, Linear};

use crate::error::Result;
use crate::store::{Init, ParamStore};

pub fn linear(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let weight = store.get(
        &format!("{prefix}.weight"),
        &[out_dim, in_dim],
        Init::KaimingNormal { fan_in: in_dim },
        true,
    )?;
    let bias = store.get(&format!("{prefix}.bias"), &[out_dim], Init::Zeros, true)?;
    Ok(Linear::new(weight, Some(bias)))
}

/// Linear layer with truncated-normal weights, the attention-branch default.
pub fn linear_trunc(store: &mut ParamStore, prefix: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let weight = store.get(
        &format!("{prefix}.weight"),
        &[out_dim, in_dim],
        Init::TruncNormal { std: 0.02 },
        true,
    )?;
    let bias = store.get(&format!("{prefix}.bias"), &[out_dim], Init::Zeros, true)?;
    Ok(Linear::new(weight, Some(bias)))
}

pub fn conv2d(
    store: &mut ParamStore,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    bias: bool,
) -> Result<Conv2d> {
    let fan_in = in_ch * kernel * kernel;
    let weight = store.get(
        &format!("{prefix}.weight"),
        &[out_ch, in_ch, kernel, kernel],
        Init::KaimingNormal { fan_in },
        true,
    )?;
    let b = if bias {
        Some(store.get(&format!("{prefix}.bias"), &[out_ch], Init::Zeros, true)?)
    } else {
        None
    };
    let cfg = Conv2dConfig {
        padding,
        stride,
        ..Default::default()
    };
    Ok(Conv2d::new(weight, b, cfg))
}

pub fn layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<LayerNorm> {
    let gamma = store.get(&format!("{prefix}.gamma"), &[dim], Init::Ones, true)?;
    let beta = store.get(&format!("{prefix}.beta"), &[dim], Init::Zeros, true)?;
    Ok(LayerNorm::new(gamma, beta, 1e-5))
}

/// Spatial batch normalization over NCHW tensors.
///
/// Running statistics are registered in the store as non-trainable buffers
/// so checkpoints capture them; training mode updates them in place with
/// detached batch statistics (momentum 0.1, unbiased running variance).
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        let gamma = store.get(&format!("{prefix}.gamma"), &[channels], Init::Ones, true)?;
        let beta = store.get(&format!("{prefix}.beta"), &[channels], Init::Zeros, true)?;
        let running_mean = store.get_var(&format!("{prefix}.running_mean"), &[channels], Init::Zeros, false)?;
        let running_var = store.get_var(&format!("{prefix}.running_var"), &[channels], Init::Ones, false)?;
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        let affine = |y: Tensor| -> Result<Tensor> {
            let g = self.gamma.reshape((1, c, 1, 1))?;
            let b = self.beta.reshape((1, c, 1, 1))?;
            Ok(y.broadcast_mul(&g)?.broadcast_add(&b)?)
        };
        if train {
            // per-channel batch stats: flatten (N, H, W) per channel
            let xt = x.transpose(0, 1)?.flatten_from(1)?.contiguous()?;
            let n = xt.dim(1)? as f64;
            let mean = xt.mean_keepdim(1)?; // (c, 1)
            let centered = xt.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(1)?; // biased
            let normed = centered.broadcast_div(&(&var + self.eps)?.sqrt()?)?;

            let new_mean = ((self.running_mean.as_tensor() * (1.0 - self.momentum))?
                + (mean.flatten_all()?.detach() * self.momentum)?)?;
            self.running_mean.set(&new_mean)?;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let new_var = ((self.running_var.as_tensor() * (1.0 - self.momentum))?
                + (var.flatten_all()?.detach() * (self.momentum * unbiased))?)?;
            self.running_var.set(&new_var)?;

            let dims = x.transpose(0, 1)?.dims().to_vec();
            let y = normed.reshape(dims)?.transpose(0, 1)?;
            affine(y)
        } else {
            let mean = self.running_mean.as_tensor().reshape((1, c, 1, 1))?;
            let var = self.running_var.as_tensor().reshape((1, c, 1, 1))?;
            let y = x.broadcast_sub(&mean)?.broadcast_div(&(&var + self.eps)?.sqrt()?)?;
            affine(y)
        }
    }
}

/// Non-overlapping 1-D max pooling over the last dimension of a (batch, len)
/// tensor. `len` must be divisible by the window.
pub fn max_pool_1d(x: &Tensor, window: usize) -> Result<Tensor> {
    let (batch, len) = x.dims2()?;
    if window == 0 || len % window != 0 {
        return Err(crate::error::Error::shape(
            "max_pool_1d",
            format!("length divisible by window {window}"),
            format!("length {len}"),
        ));
    }
    Ok(x.reshape((batch, len / window, window))?.max(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn max_pool_1d_pairs() {
        let x = Tensor::new(&[[1f64, 5., 2., 3., 9., 0.]], &Device::Cpu).unwrap();
        let y = max_pool_1d(&x, 2).unwrap();
        assert_eq!(y.to_vec2::<f64>().unwrap(), vec![vec![5.0, 3.0, 9.0]]);
    }

    #[test]
    fn max_pool_1d_rejects_non_divisor() {
        let x = Tensor::zeros((1, 10), DType::F64, &Device::Cpu).unwrap();
        assert!(max_pool_1d(&x, 3).is_err());
    }

    #[test]
    fn batch_norm_eval_is_identity_at_default_stats() {
        let mut store = ParamStore::new(DType::F64, Device::Cpu, 0);
        let bn = BatchNorm2d::new(&mut store, "bn", 2).unwrap();
        let x = Tensor::new(&[[[[1f64, 2.], [3., 4.]], [[5., 6.], [7., 8.]]]], &Device::Cpu).unwrap();
        let y = bn.forward(&x, false).unwrap();
        let diff = (y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-5, "eval BN at unit stats should be ~identity, diff={diff}");
    }

    #[test]
    fn batch_norm_train_normalizes_batch() {
        let mut store = ParamStore::new(DType::F64, Device::Cpu, 0);
        let bn = BatchNorm2d::new(&mut store, "bn", 1).unwrap();
        let x = Tensor::new(&[[[[0f64, 2.], [4., 6.]]]], &Device::Cpu).unwrap();
        let y = bn.forward(&x, true).unwrap();
        let mean = y.mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(mean.abs() < 1e-10);
        // running stats moved toward batch stats
        let rm = store.tensor("bn.running_mean").unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((rm - 0.3).abs() < 1e-12, "running mean {rm}");
    }
}
