//! Size-weighted Huber loss and the other training objectives.
//!
//! Targets are polyp-style sizes in millimetres. The regression head
//! predicts in a normalised space where `min_mm ↦ -1` and `max_mm ↦ +1`.
//! The Huber residual is taken in that normalised space while the band
//! weight is chosen from the millimetre target:
//!
//! ```text
//! A(y) = α₁  if T₁ < y ≤ T₂
//!        α₂  if y > T₂
//!        1   otherwise
//! L_W  = (1/N) Σ Huber(pred_i, norm(y_i)) · A(y_i)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Array, Graph, Var};

/// Which space the Huber residual is measured in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualSpace {
    #[default]
    Normalized,
    Millimeter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SizeLossConfig {
    pub t1_mm: f64,
    pub alpha1: f64,
    pub t2_mm: f64,
    pub alpha2: f64,
    pub huber_delta: f64,
    pub min_mm: f64,
    pub max_mm: f64,
    pub residual_space: ResidualSpace,
}

impl Default for SizeLossConfig {
    fn default() -> Self {
        Self {
            t1_mm: 5.0,
            alpha1: 2.0,
            t2_mm: 10.0,
            alpha2: 3.0,
            huber_delta: 1.0,
            min_mm: 0.5,
            max_mm: 20.0,
            residual_space: ResidualSpace::Normalized,
        }
    }
}

impl SizeLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.t1_mm && self.t1_mm < self.t2_mm) {
            return Err(Error::config("loss.t1_mm", "need 0 < t1_mm < t2_mm"));
        }
        if !(self.alpha1 >= 1.0 && self.alpha2 >= 1.0) {
            return Err(Error::config("loss.alpha1", "band weights must be >= 1"));
        }
        if !(self.min_mm < self.max_mm) {
            return Err(Error::config("loss.min_mm", "need min_mm < max_mm"));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::config("loss.huber_delta", "must be positive"));
        }
        Ok(())
    }

    /// Band weight `A` for a target size in millimetres.
    pub fn size_weight(&self, y_mm: f64) -> f64 {
        if y_mm > self.t2_mm {
            self.alpha2
        } else if y_mm > self.t1_mm {
            self.alpha1
        } else {
            1.0
        }
    }

    /// Affine map `[min_mm, max_mm] → [-1, 1]`; out-of-range sizes clamp.
    pub fn normalize(&self, y_mm: f64) -> f64 {
        let y = y_mm.clamp(self.min_mm, self.max_mm);
        2.0 * (y - self.min_mm) / (self.max_mm - self.min_mm) - 1.0
    }

    pub fn denormalize(&self, y_norm: f64) -> f64 {
        (y_norm + 1.0) * 0.5 * (self.max_mm - self.min_mm) + self.min_mm
    }

    pub fn is_out_of_range(&self, y_mm: f64) -> bool {
        y_mm < self.min_mm || y_mm > self.max_mm
    }
}

/// Normalised targets plus how many inputs had to be clamped.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedTargets {
    pub values: Vec<f64>,
    pub clamped: usize,
}

pub fn normalize_targets(targets_mm: &[f64], cfg: &SizeLossConfig) -> NormalizedTargets {
    let clamped = targets_mm.iter().filter(|&&y| cfg.is_out_of_range(y)).count();
    if clamped > 0 {
        log::warn!("{clamped} target size(s) outside [{}, {}] mm clamped", cfg.min_mm, cfg.max_mm);
    }
    NormalizedTargets {
        values: targets_mm.iter().map(|&y| cfg.normalize(y)).collect(),
        clamped,
    }
}

/// Scalar Huber penalty of a residual.
pub fn huber(pred: f64, target: f64, delta: f64) -> f64 {
    let r = (pred - target).abs();
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

fn flatten_preds<'g>(preds: &Var<'g>, n: usize, op: &'static str) -> Result<Var<'g>> {
    let shape = preds.shape();
    let ok = match shape.as_slice() {
        [m] => *m == n,
        [m, 1] => *m == n,
        _ => false,
    };
    if !ok || n == 0 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape,
            rhs: vec![n],
        });
    }
    preds.reshape(&[n])
}

/// Size-weighted Huber loss of normalised predictions (`[N]` or `[N, 1]`)
/// against millimetre targets.
pub fn weighted_huber_loss<'g>(
    g: &'g Graph,
    preds_norm: &Var<'g>,
    targets_mm: &[f64],
    cfg: &SizeLossConfig,
) -> Result<Var<'g>> {
    let n = targets_mm.len();
    let preds = flatten_preds(preds_norm, n, "weighted_huber_loss")?;
    let weights = g.constant(Array::vector(
        &targets_mm.iter().map(|&y| cfg.size_weight(y)).collect::<Vec<_>>(),
    ));
    let residual = match cfg.residual_space {
        ResidualSpace::Normalized => {
            let t = normalize_targets(targets_mm, cfg).values;
            preds.sub(&g.constant(Array::vector(&t)))?
        }
        ResidualSpace::Millimeter => {
            let half_range = 0.5 * (cfg.max_mm - cfg.min_mm);
            let pred_mm = preds.add_scalar(1.0).scale(half_range).add_scalar(cfg.min_mm);
            let t: Vec<f64> = targets_mm
                .iter()
                .map(|&y| y.clamp(cfg.min_mm, cfg.max_mm))
                .collect();
            pred_mm.sub(&g.constant(Array::vector(&t)))?
        }
    };
    Ok(residual.huber(cfg.huber_delta)?.mul(&weights)?.mean_all())
}

/// Mean squared error `(1/N) Σ (pred − target)²` on raw targets.
pub fn mse_loss<'g>(g: &'g Graph, preds: &Var<'g>, targets: &[f64]) -> Result<Var<'g>> {
    let preds = flatten_preds(preds, targets.len(), "mse_loss")?;
    Ok(preds
        .sub(&g.constant(Array::vector(targets)))?
        .square()
        .mean_all())
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`), `[B, K]`.
pub fn cross_entropy<'g>(g: &'g Graph, logits: &Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let shape = logits.shape();
    let (b, k) = match shape.as_slice() {
        [b, k] if *b == labels.len() && *b > 0 => (*b, *k),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            })
        }
    };
    let mut onehot = Array::zeros(vec![b, k]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Domain {
                op: "cross_entropy",
                msg: format!("label {l} out of range for {k} classes"),
            });
        }
        onehot.data_mut()[i * k + l] = 1.0;
    }
    let picked = logits.log_softmax(1)?.mul(&g.constant(onehot))?.sum_all();
    Ok(picked.scale(-1.0 / b as f64))
}

/// Training objective selectable from configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    WeightedHuber(SizeLossConfig),
    CrossEntropy,
    Mse,
}

/// Per-sample supervision for a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Millimetre sizes (weighted Huber) or raw values (MSE).
    Values(Vec<f64>),
    Labels(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(v) => v.len(),
            Targets::Labels(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Objective {
    pub fn loss<'g>(&self, g: &'g Graph, outputs: &Var<'g>, targets: &Targets) -> Result<Var<'g>> {
        match (self, targets) {
            (Objective::WeightedHuber(cfg), Targets::Values(y)) => {
                weighted_huber_loss(g, outputs, y, cfg)
            }
            (Objective::Mse, Targets::Values(y)) => mse_loss(g, outputs, y),
            (Objective::CrossEntropy, Targets::Labels(l)) => cross_entropy(g, outputs, l),
            _ => Err(Error::config(
                "loss.kind",
                "objective does not match the target type of the data",
            )),
        }
    }
}
