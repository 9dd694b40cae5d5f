//! Two-branch score regression head.
//!
//! The score branch maps the final-stage vector `f_s` through two linear
//! layers with leaky rectifications to an unbounded scalar `S`; the weight
//! branch maps the multi-scale vector `f_w` to a sigmoid-bounded `W` in
//! (0, 1). The prediction is their product, so the weight branch acts as a
//! learned confidence that shrinks the raw score. The weight branch can be
//! dropped entirely, in which case the prediction is `S` alone.

use candle_core::{Module, Tensor};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers;
use crate::store::ParamStore;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub hidden: usize,
    pub leaky_slope: f64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            leaky_slope: 0.01,
        }
    }
}

pub struct Regressor {
    score_fc1: Linear,
    score_fc2: Linear,
    weight_fc1: Option<Linear>,
    weight_fc2: Option<Linear>,
    slope: f64,
}

impl Regressor {
    /// `f_w_width` is `None` when the weight branch is ablated.
    pub fn new(
        store: &mut ParamStore,
        cfg: RegressorConfig,
        f_s_width: usize,
        f_w_width: Option<usize>,
    ) -> Result<Self> {
        if cfg.hidden == 0 {
            return Err(Error::Config("regressor hidden width must be positive".into()));
        }
        let score_fc1 = layers::linear(store, "regressor.score.fc1", f_s_width, cfg.hidden)?;
        let score_fc2 = layers::linear(store, "regressor.score.fc2", cfg.hidden, 1)?;
        let (weight_fc1, weight_fc2) = match f_w_width {
            Some(w) => (
                Some(layers::linear(store, "regressor.weight.fc1", w, cfg.hidden)?),
                Some(layers::linear(store, "regressor.weight.fc2", cfg.hidden, 1)?),
            ),
            None => (None, None),
        };
        Ok(Self {
            score_fc1,
            score_fc2,
            weight_fc1,
            weight_fc2,
            slope: cfg.leaky_slope,
        })
    }

    /// Build from explicit layers (used by tests).
    pub fn from_parts(
        score_fc1: Linear,
        score_fc2: Linear,
        weight: Option<(Linear, Linear)>,
        slope: f64,
    ) -> Self {
        let (weight_fc1, weight_fc2) = match weight {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        Self {
            score_fc1,
            score_fc2,
            weight_fc1,
            weight_fc2,
            slope,
        }
    }

    pub fn has_weight_branch(&self) -> bool {
        self.weight_fc1.is_some()
    }

    fn leaky(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::leaky_relu(x, self.slope)?)
    }

    /// S = leaky(fc2(leaky(fc1(f_s)))), shape (batch,).
    pub fn score_branch(&self, f_s: &Tensor) -> Result<Tensor> {
        let h = self.leaky(&self.score_fc1.forward(f_s)?)?;
        let s = self.leaky(&self.score_fc2.forward(&h)?)?;
        Ok(s.squeeze(1)?)
    }

    /// W = sigmoid(fc2(leaky(fc1(f_w)))), shape (batch,), in (0, 1).
    pub fn weight_branch(&self, f_w: &Tensor) -> Result<Tensor> {
        let (fc1, fc2) = match (&self.weight_fc1, &self.weight_fc2) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Config("weight branch is disabled".into())),
        };
        let h = self.leaky(&fc1.forward(f_w)?)?;
        let w = candle_nn::ops::sigmoid(&fc2.forward(&h)?)?;
        Ok(w.squeeze(1)?)
    }

    /// Final prediction: `S * W`, or `S` when the weight branch is absent.
    pub fn predict(&self, f_w: &Tensor, f_s: &Tensor) -> Result<Tensor> {
        let s = self.score_branch(f_s)?;
        if self.has_weight_branch() {
            let w = self.weight_branch(f_w)?;
            Ok(s.mul(&w)?)
        } else {
            Ok(s)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    const DEV: Device = Device::Cpu;

    fn lin(rows: usize, cols: usize, values: Vec<f64>, bias: Vec<f64>) -> Linear {
        Linear::new(
            Tensor::from_vec(values, (rows, cols), &DEV).unwrap(),
            Some(Tensor::from_vec(bias, (rows,), &DEV).unwrap()),
        )
    }

    fn zeros_regressor(f_s: usize, f_w: usize, hidden: usize) -> Regressor {
        let z = |r, c| lin(r, c, vec![0.0; r * c], vec![0.0; r]);
        Regressor::from_parts(
            z(hidden, f_s),
            z(1, hidden),
            Some((z(hidden, f_w), z(1, hidden))),
            0.01,
        )
    }

    #[test]
    fn zero_parameters_give_zero_score_and_half_weight() {
        let reg = zeros_regressor(3, 4, 2);
        let f_s = Tensor::zeros((1, 3), DType::F64, &DEV).unwrap();
        let f_w = Tensor::zeros((1, 4), DType::F64, &DEV).unwrap();
        assert_eq!(reg.score_branch(&f_s).unwrap().to_vec1::<f64>().unwrap(), vec![0.0]);
        assert_eq!(reg.weight_branch(&f_w).unwrap().to_vec1::<f64>().unwrap(), vec![0.5]);
        assert_eq!(reg.predict(&f_w, &f_s).unwrap().to_vec1::<f64>().unwrap(), vec![0.0]);
    }

    #[test]
    fn score_branch_double_leaky_on_negative_input() {
        // 1-wide layers with unit weight: S = leaky(leaky(-1)) = -0.0001
        let reg = Regressor::from_parts(
            lin(1, 1, vec![1.0], vec![0.0]),
            lin(1, 1, vec![1.0], vec![0.0]),
            None,
            0.01,
        );
        let f_s = Tensor::from_vec(vec![-1.0f64], (1, 1), &DEV).unwrap();
        let s = reg.score_branch(&f_s).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((s - (-0.0001)).abs() < 1e-15, "got {s}");
    }

    #[test]
    fn weight_branch_stays_in_unit_interval() {
        let mut store = ParamStore::new(DType::F64, DEV, 3);
        let reg = Regressor::new(&mut store, RegressorConfig::default(), 6, Some(8)).unwrap();
        for seed in 0..5 {
            let f_w = Tensor::from_vec(
                (0..8).map(|i| ((seed * 8 + i) as f64 * 0.7).sin() * 10.0).collect(),
                (1, 8),
                &DEV,
            )
            .unwrap();
            let w = reg.weight_branch(&f_w).unwrap().to_vec1::<f64>().unwrap()[0];
            assert!(w > 0.0 && w < 1.0, "weight {w} escaped (0,1)");
        }
    }

    #[test]
    fn predict_multiplies_branches() {
        // construct parameters yielding S = 2 and W = 0.5 exactly
        let reg = Regressor::from_parts(
            lin(1, 1, vec![1.0], vec![0.0]),
            lin(1, 1, vec![1.0], vec![0.0]),
            Some((lin(1, 1, vec![0.0], vec![0.0]), lin(1, 1, vec![0.0], vec![0.0]))),
            0.01,
        );
        let f_s = Tensor::from_vec(vec![2.0f64], (1, 1), &DEV).unwrap();
        let f_w = Tensor::from_vec(vec![9.0f64], (1, 1), &DEV).unwrap();
        let s = reg.score_branch(&f_s).unwrap().to_vec1::<f64>().unwrap()[0];
        let w = reg.weight_branch(&f_w).unwrap().to_vec1::<f64>().unwrap()[0];
        assert_eq!((s, w), (2.0, 0.5));
        let score = reg.predict(&f_w, &f_s).unwrap().to_vec1::<f64>().unwrap()[0];
        assert_eq!(score, 1.0);
    }

    #[test]
    fn score_magnitude_bounds_prediction() {
        let mut store = ParamStore::new(DType::F64, DEV, 11);
        let reg = Regressor::new(&mut store, RegressorConfig::default(), 5, Some(7)).unwrap();
        for seed in 0..10u64 {
            let f_s = Tensor::from_vec(
                (0..5).map(|i| ((seed * 31 + i) as f64).sin() * 4.0).collect(),
                (1, 5),
                &DEV,
            )
            .unwrap();
            let f_w = Tensor::from_vec(
                (0..7).map(|i| ((seed * 17 + i) as f64).cos() * 4.0).collect(),
                (1, 7),
                &DEV,
            )
            .unwrap();
            let s = reg.score_branch(&f_s).unwrap().to_vec1::<f64>().unwrap()[0];
            let score = reg.predict(&f_w, &f_s).unwrap().to_vec1::<f64>().unwrap()[0];
            assert!(score.abs() <= s.abs(), "|Score|={} > |S|={}", score.abs(), s.abs());
            if s != 0.0 {
                assert!(score.abs() < s.abs());
            }
        }
    }

    #[test]
    fn without_weight_branch_prediction_is_raw_score() {
        let mut store = ParamStore::new(DType::F64, DEV, 5);
        let reg = Regressor::new(&mut store, RegressorConfig::default(), 4, None).unwrap();
        assert!(!reg.has_weight_branch());
        let f_s = Tensor::from_vec(vec![0.4f64, -1.0, 2.0, 0.1], (1, 4), &DEV).unwrap();
        let f_w = Tensor::zeros((1, 9), DType::F64, &DEV).unwrap();
        let s = reg.score_branch(&f_s).unwrap().to_vec1::<f64>().unwrap();
        let p = reg.predict(&f_w, &f_s).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(s, p);
        assert!(reg.weight_branch(&f_w).is_err());
    }
}
