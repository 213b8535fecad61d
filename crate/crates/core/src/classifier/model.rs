use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassifierError, Dataset};

/// SGD settings. The learning rate follows `eta0 / t^power_t` over the
/// global step count `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub eta0: f64,
    pub power_t: f64,
    pub l2: f64,
    pub epochs: u32,
    pub seed: u64,
    /// Weight each class by `n / (2 n_class)`.
    pub balanced: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams { eta0: 0.1, power_t: 0.5, l2: 1e-4, epochs: 5, seed: 0, balanced: true }
    }
}

/// Model file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearModel {
    pub features: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub loss: String,
    pub seed: u64,
}

impl LinearModel {
    pub fn new(weights: Vec<f64>, bias: f64, seed: u64) -> Self {
        LinearModel { features: weights.len(), weights, bias, loss: "log".into(), seed }
    }

    pub fn from_json(text: &str) -> Result<Self, ClassifierError> {
        let m: LinearModel = serde_json::from_str(text).map_err(|e| ClassifierError::MalformedModel(e.to_string()))?;
        if m.loss != "log" {
            return Err(ClassifierError::UnsupportedLoss(m.loss));
        }
        if m.weights.len() != m.features {
            return Err(ClassifierError::DimensionMismatch { expected: m.features, got: m.weights.len() });
        }
        if !m.bias.is_finite() || m.weights.iter().any(|w| !w.is_finite()) {
            return Err(ClassifierError::MalformedModel("non-finite parameter".into()));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serializes");
        s.push('\n');
        s
    }

    fn check(&self, x: &[u8]) -> Result<(), ClassifierError> {
        if x.len() != self.features {
            return Err(ClassifierError::DimensionMismatch { expected: self.features, got: x.len() });
        }
        if let Some(v) = x.iter().find(|v| **v > 1) {
            return Err(ClassifierError::NonBinary(v.to_string()));
        }
        Ok(())
    }

    /// w·x + b.
    pub fn decision(&self, x: &[u8]) -> Result<f64, ClassifierError> {
        self.check(x)?;
        Ok(margin(&self.weights, self.bias, x))
    }

    pub fn probability(&self, x: &[u8]) -> Result<f64, ClassifierError> {
        Ok(sigmoid(self.decision(x)?))
    }
}

fn margin(w: &[f64], b: f64, x: &[u8]) -> f64 {
    w.iter().zip(x).filter(|(_, xi)| **xi == 1).map(|(wi, _)| wi).sum::<f64>() + b
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Class 1 iff σ(w·x + b) ≥ 0.5, i.e. the margin is non-negative.
pub fn predict_class(model: &LinearModel, x: &[u8]) -> Result<i64, ClassifierError> {
    Ok(if model.decision(x)? >= 0.0 { 1 } else { 0 })
}

pub fn train(data: &Dataset, hp: &Hyperparams) -> Result<LinearModel, ClassifierError> {
    if data.rows.len() < 2 {
        return Err(ClassifierError::TooFewSamples(data.rows.len()));
    }
    if !(hp.eta0 > 0.0 && hp.eta0.is_finite()) || !(hp.l2 >= 0.0 && hp.l2.is_finite()) || hp.power_t < 0.0 {
        return Err(ClassifierError::InvalidHyperparams(format!("{hp:?}")));
    }
    if hp.epochs == 0 {
        return Err(ClassifierError::InvalidHyperparams("epochs must be at least 1".into()));
    }
    let f = data.features;
    for (x, _) in &data.rows {
        if x.len() != f {
            return Err(ClassifierError::DimensionMismatch { expected: f, got: x.len() });
        }
    }
    let positives = data.rows.iter().filter(|(_, y)| *y == 1).count();
    let n = data.rows.len();
    if positives == 0 || positives == n {
        return Err(ClassifierError::SingleClass(if positives == 0 { 0 } else { 1 }));
    }
    let class_weight = |y: u8| {
        if !hp.balanced {
            1.0
        } else if y == 1 {
            n as f64 / (2.0 * positives as f64)
        } else {
            n as f64 / (2.0 * (n - positives) as f64)
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut w = vec![0.0; f];
    let mut b = 0.0;
    let mut t = 0u64;
    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = hp.eta0 / (t as f64).powf(hp.power_t);
            let (x, y) = &data.rows[i];
            let g = class_weight(*y) * (sigmoid(margin(&w, b, x)) - f64::from(*y));
            for (wj, xj) in w.iter_mut().zip(x) {
                *wj -= eta * (g * f64::from(*xj) + hp.l2 * *wj);
            }
            b -= eta * g;
        }
    }
    Ok(LinearModel::new(w, b, hp.seed))
}

pub fn train_timed(data: &Dataset, hp: &Hyperparams) -> Result<(LinearModel, Duration), ClassifierError> {
    let start = Instant::now();
    let model = train(data, hp)?;
    Ok((model, start.elapsed()))
}
