//! Per-class logistic regression over average-pooled attribution maps, and
//! Youden-index threshold calibration.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use tch::{nn, Tensor};

use crate::error::{Error, Result};

/// Bias-free logistic regression `σ(Σ w ⊙ pool_γ(M))` for one class.
#[derive(Debug)]
pub struct LogRegHead {
    weights: Tensor,
    pool: usize,
}

impl LogRegHead {
    /// Zero-initialized `(side/γ, side/γ)` weight grid registered under `path`.
    pub fn new(path: &nn::Path, name: &str, image_size: usize, pool: usize) -> Result<Self> {
        if pool == 0 || image_size % pool != 0 {
            return Err(Error::ShapeMismatch(format!("pool factor {pool} does not divide {image_size}")));
        }
        let side = (image_size / pool) as i64;
        let weights = path.var(name, &[side, side], nn::Init::Const(0.0));
        Ok(LogRegHead { weights, pool })
    }

    /// Head around an existing weight grid (not registered with any var store).
    pub fn from_weights(weights: Tensor, pool: usize) -> Result<Self> {
        if weights.dim() != 2 || pool == 0 {
            return Err(Error::ShapeMismatch(format!("weight grid {:?}", weights.size())));
        }
        Ok(LogRegHead { weights, pool })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn pool_factor(&self) -> usize {
        self.pool
    }

    /// `(B,1,H,W)` → `(B,1,H/γ,W/γ)`.
    pub fn pooled(&self, m: &Tensor) -> Result<Tensor> {
        pool(m, self.pool, &self.weights.size())
    }

    /// Pre-sigmoid scores, shape `(B,)`.
    pub fn logits(&self, m: &Tensor) -> Result<Tensor> {
        let pooled = self.pooled(m)?;
        Ok((&pooled * &self.weights).sum_dim_intlist(&[1i64, 2, 3][..], false, pooled.kind()))
    }

    pub fn predict(&self, m: &Tensor) -> Result<Tensor> {
        Ok(self.logits(m)?.sigmoid())
    }
}

/// Average pooling by `γ`, checking that the result matches `grid` (H/γ, W/γ).
pub fn pool(m: &Tensor, gamma: usize, grid: &[i64]) -> Result<Tensor> {
    let size = m.size();
    let g = gamma as i64;
    if size.len() != 4 || size[1] != 1 || size[2] % g != 0 || size[3] % g != 0 {
        return Err(Error::ShapeMismatch(format!("attribution {size:?} incompatible with pool factor {gamma}")));
    }
    if grid.len() != 2 || size[2] / g != grid[0] || size[3] / g != grid[1] {
        return Err(Error::ShapeMismatch(format!("pooled {:?} vs weight grid {grid:?}", [size[2] / g, size[3] / g])));
    }
    Ok(m.avg_pool2d([g, g], [g, g], [0, 0], false, true, None::<i64>))
}

/// Sensitivity + specificity − 1 when predicting positive for `score >= tau`.
pub fn youden_index(pos: &[f64], neg: &[f64], tau: f64) -> f64 {
    let tpr = pos.iter().filter(|&&s| s >= tau).count() as f64 / pos.len() as f64;
    let tnr = neg.iter().filter(|&&s| s < tau).count() as f64 / neg.len() as f64;
    tpr + tnr - 1.0
}

/// Threshold maximizing the Youden index over midpoints of the sorted unique
/// scores; the lowest such midpoint wins ties.
pub fn youden_threshold(pos: &[f64], neg: &[f64]) -> (f64, f64) {
    let mut unique: Vec<f64> = pos.iter().chain(neg).copied().collect();
    unique.sort_by(f64::total_cmp);
    unique.dedup();
    let mut best: Option<(f64, f64)> = None;
    for pair in unique.windows(2) {
        let tau = 0.5 * (pair[0] + pair[1]);
        let j = youden_index(pos, neg, tau);
        if best.map_or(true, |(_, bj)| j > bj) {
            best = Some((tau, j));
        }
    }
    best.unwrap_or((0.5, 0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    pub class_names: Vec<String>,
    pub thresholds: Vec<f64>,
}

/// `scores[c][i]` and `labels[i][c]`.
pub fn calibrate_thresholds(class_names: &[String], scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<ThresholdTable> {
    if scores.len() != class_names.len() {
        return Err(Error::ShapeMismatch(format!("{} score lists for {} classes", scores.len(), class_names.len())));
    }
    let mut thresholds = Vec::with_capacity(scores.len());
    for (c, class_scores) in scores.iter().enumerate() {
        if class_scores.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!("{} scores vs {} labels", class_scores.len(), labels.len())));
        }
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (s, l) in class_scores.iter().zip(labels) {
            if l[c] == 1 {
                pos.push(*s)
            } else {
                neg.push(*s)
            }
        }
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::DegenerateClass(c));
        }
        let (tau, j) = youden_threshold(&pos, &neg);
        if j <= 0.0 {
            warn!("class {}: best Youden index is {j:.3}; threshold {tau:.3} is uninformative", class_names[c]);
        }
        thresholds.push(tau);
    }
    Ok(ThresholdTable { class_names: class_names.to_vec(), thresholds })
}

impl ThresholdTable {
    pub fn get(&self, class: usize) -> Option<f64> {
        self.thresholds.get(class).copied()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<&str, f64> =
            self.class_names.iter().map(String::as_str).zip(self.thresholds.iter().copied()).collect();
        serde_json::to_value(map).expect("string-keyed map serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, class_names: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<String, f64> = serde_json::from_str(&text)?;
        let thresholds = class_names
            .iter()
            .map(|n| map.get(n).copied().ok_or_else(|| Error::UnknownClass { row: 0, class: n.clone() }))
            .collect::<Result<_>>()?;
        Ok(ThresholdTable { class_names: class_names.to_vec(), thresholds })
    }
}
