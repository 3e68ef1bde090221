//! Size binning, confusion matrices and fold-consolidated evaluation.
//!
//! Triclass bins are inclusive at both landmarks: `D` is `y ≤ 5`, `L` is
//! `y ≥ 10`. The binary scheme splits at `10` with `Over10` inclusive, so
//! `L ⇔ Over10`.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Triclass,
    Binary,
}

impl Scheme {
    pub const ALL: [Scheme; 2] = [Scheme::Triclass, Scheme::Binary];

    pub fn classes(self) -> &'static [SizeClass] {
        match self {
            Scheme::Triclass => &[SizeClass::Diminutive, SizeClass::Small, SizeClass::Large],
            Scheme::Binary => &[SizeClass::Under10, SizeClass::Over10],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Triclass => "triclass",
            Scheme::Binary => "binary",
        }
    }
}

/// Ordered within each scheme: `D < S < L`, `Under10 < Over10`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SizeClass {
    Diminutive,
    Small,
    Large,
    Under10,
    Over10,
}

impl SizeClass {
    /// Position within its scheme.
    pub fn index(self) -> usize {
        match self {
            SizeClass::Diminutive | SizeClass::Under10 => 0,
            SizeClass::Small | SizeClass::Over10 => 1,
            SizeClass::Large => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SizeClass::Diminutive => "D",
            SizeClass::Small => "S",
            SizeClass::Large => "L",
            SizeClass::Under10 => "<10",
            SizeClass::Over10 => ">=10",
        }
    }
}

/// Landmarks of the triclass scheme; the binary scheme uses the second.
pub const BIN_EDGES_MM: [f64; 2] = [5.0, 10.0];

pub fn bin_size(y_mm: f64, scheme: Scheme) -> Result<SizeClass> {
    if !(y_mm >= 0.0) {
        return Err(Error::Metrics(format!("size must be a non-negative number, got {y_mm}")));
    }
    Ok(match scheme {
        Scheme::Triclass if y_mm <= 5.0 => SizeClass::Diminutive,
        Scheme::Triclass if y_mm < 10.0 => SizeClass::Small,
        Scheme::Triclass => SizeClass::Large,
        Scheme::Binary if y_mm < 10.0 => SizeClass::Under10,
        Scheme::Binary => SizeClass::Over10,
    })
}

/// `K × K` counts; row is the true class, column the prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_labels(truth: &[usize], pred: &[usize], k: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Metrics(format!(
                "{} labels vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut cm = Self::new(k);
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= k || p >= k {
                return Err(Error::Metrics(format!("label out of range for {k} classes")));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    fn predicted(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }

    /// `None` when class `k` has no true samples.
    pub fn recall(&self, k: usize) -> Option<f64> {
        let s = self.support(k);
        (s > 0).then(|| self.counts[k][k] as f64 / s as f64)
    }

    /// `None` when class `k` is never predicted.
    pub fn precision(&self, k: usize) -> Option<f64> {
        let p = self.predicted(k);
        (p > 0).then(|| self.counts[k][k] as f64 / p as f64)
    }

    /// One-vs-rest specificity; `None` when every sample is class `k`.
    pub fn specificity(&self, k: usize) -> Option<f64> {
        let negatives = self.total() - self.support(k);
        let false_pos = self.predicted(k) - self.counts[k][k];
        (negatives > 0).then(|| (negatives - false_pos) as f64 / negatives as f64)
    }

    /// `2PR / (P + R)`, zero when undefined.
    pub fn f1(&self, k: usize) -> f64 {
        let p = self.precision(k).unwrap_or(0.0);
        let r = self.recall(k).unwrap_or(0.0);
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn accuracy(&self) -> Result<f64> {
        self.non_empty()?;
        let diag: u64 = (0..self.k()).map(|i| self.counts[i][i]).sum();
        Ok(diag as f64 / self.total() as f64)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k() != self.k() {
            return Err(Error::Metrics("confusion matrices of different size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    fn non_empty(&self) -> Result<()> {
        if self.total() == 0 {
            Err(Error::Metrics("empty confusion matrix".into()))
        } else {
            Ok(())
        }
    }
}

pub fn confusion(preds_mm: &[f64], targets_mm: &[f64], scheme: Scheme) -> Result<ConfusionMatrix> {
    if preds_mm.len() != targets_mm.len() {
        return Err(Error::Metrics(format!(
            "{} predictions vs {} targets",
            preds_mm.len(),
            targets_mm.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(scheme.classes().len());
    for (&p, &t) in preds_mm.iter().zip(targets_mm) {
        cm.counts[bin_size(t, scheme)?.index()][bin_size(p, scheme)?.index()] += 1;
    }
    Ok(cm)
}

/// Mean recall over classes that have samples.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    cm.non_empty()?;
    let recalls: Vec<f64> = (0..cm.k()).filter_map(|k| cm.recall(k)).collect();
    if recalls.len() < cm.k() {
        log::warn!(
            "{} class(es) without samples excluded from balanced accuracy",
            cm.k() - recalls.len()
        );
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Average {
    #[default]
    Macro,
    /// Per-class F1 weighted by true support.
    Weighted,
}

pub fn f1_macro(cm: &ConfusionMatrix) -> Result<f64> {
    cm.non_empty()?;
    Ok((0..cm.k()).map(|k| cm.f1(k)).sum::<f64>() / cm.k() as f64)
}

pub fn f1_weighted(cm: &ConfusionMatrix) -> Result<f64> {
    cm.non_empty()?;
    let total = cm.total() as f64;
    Ok((0..cm.k())
        .map(|k| cm.f1(k) * cm.support(k) as f64 / total)
        .sum())
}

pub fn f1_score(cm: &ConfusionMatrix, avg: F1Average) -> Result<f64> {
    match avg {
        F1Average::Macro => f1_macro(cm),
        F1Average::Weighted => f1_weighted(cm),
    }
}

/// Mean over classes with samples of `(sensitivity + specificity) / 2`,
/// one-vs-rest. A class with no negatives contributes its sensitivity.
pub fn avg_sens_spec(cm: &ConfusionMatrix) -> Result<f64> {
    cm.non_empty()?;
    let terms: Vec<f64> = (0..cm.k())
        .filter_map(|k| {
            let sens = cm.recall(k)?;
            Some(cm.specificity(k).map_or(sens, |spec| 0.5 * (sens + spec)))
        })
        .collect();
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Metrics for one binning scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeReport {
    pub scheme: Scheme,
    pub classes: Vec<String>,
    pub balanced_accuracy: f64,
    pub f1: f64,
    pub avg_sens_spec: f64,
    pub recalls: Vec<Option<f64>>,
    pub precisions: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

impl SchemeReport {
    pub fn from_confusion(scheme: Scheme, cm: ConfusionMatrix, avg: F1Average) -> Result<Self> {
        Ok(Self {
            scheme,
            classes: scheme.classes().iter().map(|c| c.label().to_string()).collect(),
            balanced_accuracy: balanced_accuracy(&cm)?,
            f1: f1_score(&cm, avg)?,
            avg_sens_spec: avg_sens_spec(&cm)?,
            recalls: (0..cm.k()).map(|k| cm.recall(k)).collect(),
            precisions: (0..cm.k()).map(|k| cm.precision(k)).collect(),
            confusion: cm,
        })
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "balanced_accuracy" => Some(self.balanced_accuracy),
            "f1" => Some(self.f1),
            "avg_sens_spec" => Some(self.avg_sens_spec),
            _ => None,
        }
    }
}

pub const METRIC_NAMES: [&str; 3] = ["balanced_accuracy", "f1", "avg_sens_spec"];

/// One evaluated sample. `sample_id` identifies the row (e.g. a frame),
/// `unique_id` the underlying object (e.g. a polyp).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub unique_id: String,
    pub pred_mm: f64,
    pub target_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub triclass: SchemeReport,
    pub binary: SchemeReport,
    pub samples: usize,
    pub unique_ids: usize,
}

impl EvalReport {
    pub fn scheme(&self, scheme: Scheme) -> &SchemeReport {
        match scheme {
            Scheme::Triclass => &self.triclass,
            Scheme::Binary => &self.binary,
        }
    }

    /// `(fold, scheme, metric, value)` rows.
    pub fn rows(&self, fold: &str) -> Vec<MetricRow> {
        let mut out = Vec::new();
        for scheme in Scheme::ALL {
            let r = self.scheme(scheme);
            for name in METRIC_NAMES {
                out.push(MetricRow {
                    fold: fold.to_string(),
                    scheme: scheme.as_str().to_string(),
                    metric: name.to_string(),
                    value: r.metric(name).expect("known metric"),
                });
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub fold: String,
    pub scheme: String,
    pub metric: String,
    pub value: f64,
}

pub fn evaluate(preds: &[Prediction], avg: F1Average) -> Result<EvalReport> {
    let p: Vec<f64> = preds.iter().map(|x| x.pred_mm.max(0.0)).collect();
    let t: Vec<f64> = preds.iter().map(|x| x.target_mm).collect();
    let report = |s| SchemeReport::from_confusion(s, confusion(&p, &t, s)?, avg);
    Ok(EvalReport {
        triclass: report(Scheme::Triclass)?,
        binary: report(Scheme::Binary)?,
        samples: preds.len(),
        unique_ids: preds.iter().map(|x| &x.unique_id).collect::<HashSet<_>>().len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Population variance over folds.
    pub variance: f64,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, variance }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldConsolidation {
    pub pooled: EvalReport,
    pub per_fold: Vec<EvalReport>,
    /// Keyed by `"{scheme}.{metric}"`.
    pub summary: BTreeMap<String, MetricSummary>,
}

impl FoldConsolidation {
    pub fn rows(&self) -> Vec<MetricRow> {
        let mut out: Vec<MetricRow> = self
            .per_fold
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.rows(&i.to_string()))
            .collect();
        out.extend(self.pooled.rows("consolidated"));
        out
    }
}

/// Pools disjoint per-fold predictions into one report and summarises each
/// metric over folds.
pub fn consolidate_folds(folds: &[Vec<Prediction>], avg: F1Average) -> Result<FoldConsolidation> {
    if folds.is_empty() {
        return Err(Error::Metrics("no folds to consolidate".into()));
    }
    let mut seen = HashSet::new();
    for p in folds.iter().flatten() {
        if !seen.insert(p.sample_id.as_str()) {
            return Err(Error::Metrics(format!(
                "sample `{}` appears in more than one fold",
                p.sample_id
            )));
        }
    }
    let per_fold = folds
        .iter()
        .map(|f| evaluate(f, avg))
        .collect::<Result<Vec<_>>>()?;
    let pooled_preds: Vec<Prediction> = folds.iter().flatten().cloned().collect();
    let pooled = evaluate(&pooled_preds, avg)?;
    let mut summary = BTreeMap::new();
    for scheme in Scheme::ALL {
        for name in METRIC_NAMES {
            let vals: Vec<f64> = per_fold
                .iter()
                .map(|r| r.scheme(scheme).metric(name).expect("known metric"))
                .collect();
            summary.insert(format!("{}.{name}", scheme.as_str()), MetricSummary::of(&vals));
        }
    }
    Ok(FoldConsolidation {
        pooled,
        per_fold,
        summary,
    })
}

/// Report for plain K-way classification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub f1_macro: f64,
    pub samples: usize,
    pub confusion: ConfusionMatrix,
}

pub fn classification_report(truth: &[usize], pred: &[usize], k: usize) -> Result<ClassificationReport> {
    let cm = ConfusionMatrix::from_labels(truth, pred, k)?;
    Ok(ClassificationReport {
        accuracy: cm.accuracy()?,
        balanced_accuracy: balanced_accuracy(&cm)?,
        f1_macro: f1_macro(&cm)?,
        samples: truth.len(),
        confusion: cm,
    })
}
