//! Training losses and rank-correlation metrics.
//!
//! The composite objective couples a mean-squared regression term with a
//! pairwise sigmoid ranking term:
//!
//! ```text
//! L_total = lambda_mse * mean_i (y_i - t_i)^2
//!         + lambda_rank * (2 / (n (n - 1))) * sum_{i<j} (sig(a (t_i - t_j)) - sig(a (y_i - y_j)))^2
//! ```
//!
//! Losses operate on candle tensors so gradients flow back through the
//! predictions; the evaluation metrics (SROCC / PLCC) are plain `f64`
//! functions since they are never differentiated.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights of the composite objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    /// Scaling factor inside the ranking sigmoids.
    pub alpha: f64,
    /// Weight of the MSE term.
    pub lambda_mse: f64,
    /// Weight of the ranking term.
    pub lambda_rank: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            lambda_mse: 0.5,
            lambda_rank: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.lambda_mse < 0.0 || self.lambda_rank < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

fn check_batch(pred: &Tensor, target: &Tensor, min_len: usize, what: &str) -> Result<usize> {
    let n = pred.dims1()?;
    let m = target.dims1()?;
    if n != m {
        return Err(Error::shape(what, format!("equal lengths"), format!("{n} vs {m}")));
    }
    if n < min_len {
        return Err(Error::Config(format!("{what} needs at least {min_len} samples, got {n}")));
    }
    Ok(n)
}

/// Mean squared error over a batch of scalar predictions.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_batch(pred, target, 1, "mse_loss")?;
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Pairwise sigmoid ranking loss over all unordered pairs in the batch.
pub fn ranking_loss(pred: &Tensor, target: &Tensor, alpha: f64) -> Result<Tensor> {
    let n = check_batch(pred, target, 2, "ranking_loss")?;
    let mut first = Vec::with_capacity(n * (n - 1) / 2);
    let mut second = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            first.push(i as u32);
            second.push(j as u32);
        }
    }
    let device = pred.device();
    let idx_i = Tensor::from_vec(first, ((n * (n - 1)) / 2,), device)?;
    let idx_j = Tensor::from_vec(second, ((n * (n - 1)) / 2,), device)?;

    let pair_diff = |v: &Tensor| -> Result<Tensor> {
        let a = v.index_select(&idx_i, 0)?;
        let b = v.index_select(&idx_j, 0)?;
        Ok((a - b)?)
    };
    let sig_t = candle_nn::ops::sigmoid(&(pair_diff(target)? * alpha)?)?;
    let sig_y = candle_nn::ops::sigmoid(&(pair_diff(pred)? * alpha)?)?;
    // mean over C(n,2) pairs == the 2/(n(n-1)) normalizer
    Ok((sig_t - sig_y)?.sqr()?.mean_all()?)
}

/// Weighted sum of [`mse_loss`] and [`ranking_loss`].
pub fn total_loss(pred: &Tensor, target: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    check_batch(pred, target, 2, "total_loss")?;
    let mse = (mse_loss(pred, target)? * cfg.lambda_mse)?;
    if cfg.lambda_rank == 0.0 {
        return Ok(mse);
    }
    let rank = (ranking_loss(pred, target, cfg.alpha)? * cfg.lambda_rank)?;
    Ok((mse + rank)?)
}

fn check_metric_input(y: &[f64], t: &[f64], what: &str) -> Result<()> {
    if y.len() != t.len() {
        return Err(Error::shape(what, "equal lengths", format!("{} vs {}", y.len(), t.len())));
    }
    if y.len() < 2 {
        return Err(Error::DegenerateMetric(format!("{what} needs n >= 2, got {}", y.len())));
    }
    if y.iter().chain(t.iter()).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateMetric(format!("{what} received non-finite values")));
    }
    Ok(())
}

fn pearson(y: &[f64], t: &[f64], what: &str) -> Result<f64> {
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    let mt = t.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vy = 0.0;
    let mut vt = 0.0;
    for (a, b) in y.iter().zip(t.iter()) {
        let da = a - my;
        let db = b - mt;
        cov += da * db;
        vy += da * da;
        vt += db * db;
    }
    if vy == 0.0 || vt == 0.0 {
        return Err(Error::DegenerateMetric(format!(
            "{what}: an input vector is constant, correlation undefined"
        )));
    }
    Ok(cov / (vy.sqrt() * vt.sqrt()))
}

/// Fractional ranks (1-based); tied values receive the mean of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) share the mean 1-based rank
        let mean_rank = (i + j + 1) as f64 / 2.0;
        for k in i..j {
            ranks[order[k]] = mean_rank;
        }
        i = j;
    }
    ranks
}

/// Spearman rank-order correlation: Pearson correlation of average ranks.
pub fn srocc(y: &[f64], t: &[f64]) -> Result<f64> {
    check_metric_input(y, t, "srocc")?;
    pearson(&average_ranks(y), &average_ranks(t), "srocc")
}

/// Pearson linear correlation coefficient.
pub fn plcc(y: &[f64], t: &[f64]) -> Result<f64> {
    check_metric_input(y, t, "plcc")?;
    pearson(y, t, "plcc")
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar reference value of the ranking loss, evaluated pair by pair.
/// Exposed for desk checks; the tensor path is the trained objective.
pub fn ranking_loss_scalar(pred: &[f64], target: &[f64], alpha: f64) -> f64 {
    let n = pred.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sig(alpha * (target[i] - target[j])) - sig(alpha * (pred[i] - pred[j]));
            acc += d * d;
        }
    }
    acc * 2.0 / (n as f64 * (n - 1) as f64)
}
