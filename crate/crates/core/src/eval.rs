//! CZSL / GZSL inference, calibrated stacking and per-class metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::{build_attribute_pool, cosine, FeatureSource};
use crate::model;
use crate::trainer::TrainConfig;

/// Calibration factor for AWA2-style configurations.
pub const GAMMA_AWA2: f64 = 1.0;
/// Calibration factor for CUB/SUN-style configurations, and the default.
pub const GAMMA_DEFAULT: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Czsl,
    Gzsl,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "czsl" => Ok(Self::Czsl),
            "gzsl" => Ok(Self::Gzsl),
            other => Err(Error::Config(format!("unknown eval mode `{other}` (expected czsl or gzsl)"))),
        }
    }
}

/// Index of the largest score; the first (smallest index) wins ties.
fn argmax(scores: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in scores.into_iter().enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

/// Sorts candidate rows by class id so index ties resolve to the smallest id.
fn by_class_id(ids: &[u32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| ids[i]);
    order
}

/// Unseen-only prediction: argmax of `α·cos(h, cp_u)`.
///
/// `unseen_ids[i]` names row `i` of `cp_unseen`. Panics if there are no rows.
pub fn czsl_predict(h: ArrayView1<f64>, cp_unseen: &Array2<f64>, unseen_ids: &[u32], alpha: f64) -> u32 {
    assert!(!unseen_ids.is_empty(), "czsl_predict needs at least one unseen class");
    assert_eq!(cp_unseen.nrows(), unseen_ids.len());
    let h = h.to_vec();
    let order = by_class_id(unseen_ids);
    let scores = order.iter().map(|&i| {
        let row = cp_unseen.row(i).to_vec();
        alpha * cosine(&h, &row)
    });
    unseen_ids[order[argmax(scores)]]
}

/// Generalized prediction with calibrated stacking:
/// argmax of `α·cos(h, cp) − γ·[class is seen]`.
pub fn gzsl_predict(
    h: ArrayView1<f64>,
    cp_all: &Array2<f64>,
    class_ids: &[u32],
    alpha: f64,
    gamma: f64,
    seen_mask: &[bool],
) -> u32 {
    assert_eq!(cp_all.nrows(), class_ids.len());
    assert_eq!(seen_mask.len(), class_ids.len());
    let h = h.to_vec();
    let scores: Vec<f64> = (0..class_ids.len())
        .map(|i| alpha * cosine(&h, &cp_all.row(i).to_vec()))
        .collect();
    class_ids[calibrated_argmax(&scores, class_ids, gamma, seen_mask)]
}

/// Row index of the calibrated maximum over precomputed scores.
pub fn calibrated_argmax(scores: &[f64], class_ids: &[u32], gamma: f64, seen_mask: &[bool]) -> usize {
    let order = by_class_id(class_ids);
    let calibrated = order
        .iter()
        .map(|&i| scores[i] - if seen_mask[i] { gamma } else { 0.0 });
    order[argmax(calibrated)]
}

/// Mean over `classes` of the within-class hit rate, in percent. Classes with
/// no samples are skipped with a warning; if none remain the result is 0.
pub fn per_class_accuracy(predictions: &[u32], labels: &[u32], classes: &BTreeSet<u32>) -> f64 {
    per_class_breakdown(predictions, labels, classes).0
}

fn per_class_breakdown(predictions: &[u32], labels: &[u32], classes: &BTreeSet<u32>) -> (f64, BTreeMap<u32, f64>) {
    assert_eq!(predictions.len(), labels.len());
    let mut counts: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (&p, &y) in predictions.iter().zip(labels) {
        if classes.contains(&y) {
            let e = counts.entry(y).or_default();
            e.0 += usize::from(p == y);
            e.1 += 1;
        }
    }
    let empty: Vec<_> = classes.iter().filter(|c| !counts.contains_key(c)).collect();
    if !empty.is_empty() {
        log::warn!("classes without test samples excluded from accuracy: {empty:?}");
    }
    let per_class: BTreeMap<u32, f64> = counts
        .iter()
        .map(|(&c, &(hit, n))| (c, 100.0 * hit as f64 / n as f64))
        .collect();
    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    (mean, per_class)
}

/// `2·s·u / (s + u)`, or 0 when both are 0.
pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u > 0.0 {
        2.0 * s * u / (s + u)
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionEntry {
    pub label: u32,
    pub predicted: u32,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub gamma: f64,
    /// Unseen-only accuracy, percent.
    pub acc_czsl: f64,
    /// GZSL unseen accuracy; present in gzsl mode.
    pub u: Option<f64>,
    pub s: Option<f64>,
    pub h: Option<f64>,
    /// Per-class accuracy of the mode's predictions.
    pub per_class_acc: BTreeMap<u32, f64>,
    pub confusion: Vec<ConfusionEntry>,
    /// Test images predicted as an unseen class under the mode's rule.
    pub unseen_predictions: usize,
    pub test_samples: usize,
}

impl EvalReport {
    /// Aligned text table in ACC, U, S, H order, one decimal.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"));
        let mut out = String::new();
        let _ = writeln!(out, "{:>6} {:>6} {:>6} {:>6} {:>6}", "gamma", "ACC", "U", "S", "H");
        let _ = writeln!(
            out,
            "{:>6.2} {:>6.1} {:>6} {:>6} {:>6}",
            self.gamma,
            self.acc_czsl,
            fmt(self.u),
            fmt(self.s),
            fmt(self.h)
        );
        out
    }
}

/// Table for a sweep of reports, one row per γ.
pub fn sweep_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>6} {:>6} {:>6} {:>6} {:>6}", "gamma", "ACC", "U", "S", "H");
    for r in reports {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"));
        let _ = writeln!(
            out,
            "{:>6.2} {:>6.1} {:>6} {:>6} {:>6}",
            r.gamma,
            r.acc_czsl,
            fmt(r.u),
            fmt(r.s),
            fmt(r.h)
        );
    }
    out
}

/// Test-split image embeddings and class prototypes for a trained head.
pub struct Scorer {
    pub class_ids: Vec<u32>,
    pub seen_mask: Vec<bool>,
    /// One row per test image, in `test_indices` order: `α·cos(h, cp_c)`.
    pub scores: Array2<f64>,
    pub labels: Vec<u32>,
}

impl Scorer {
    pub fn new(checkpoint: &Checkpoint, dataset: &Dataset, alpha: f64) -> Result<Self> {
        checkpoint.params.validate(&checkpoint.model)?;
        if checkpoint.model.class_semantic_dim != dataset.class_semantics().ncols()
            || checkpoint.model.channels != dataset.grid().2
        {
            return Err(Error::Config("checkpoint architecture does not match the dataset".into()));
        }
        let cp = model::encode_class_prototypes(dataset.class_semantics(), &checkpoint.params)?;
        let class_ids = dataset.class_ids().to_vec();
        let seen_mask: Vec<bool> = class_ids.iter().map(|c| dataset.seen_classes().contains(c)).collect();
        let test = dataset.test_indices();
        let mut scores = Array2::zeros((test.len(), class_ids.len()));
        let rows: Vec<Vec<f64>> = cp.rows().into_iter().map(|r| r.to_vec()).collect();
        for (mut out, &i) in scores.rows_mut().into_iter().zip(test) {
            let h = model::global_feature(&dataset.feature_map(i)).to_vec();
            for (o, row) in out.iter_mut().zip(&rows) {
                *o = alpha * cosine(&h, row);
            }
        }
        let labels = test.iter().map(|&i| dataset.labels()[i]).collect();
        Ok(Self {
            class_ids,
            seen_mask,
            scores,
            labels,
        })
    }

    pub fn czsl_predictions(&self) -> Vec<u32> {
        let unseen: Vec<usize> = (0..self.class_ids.len()).filter(|&i| !self.seen_mask[i]).collect();
        let ids: Vec<u32> = unseen.iter().map(|&i| self.class_ids[i]).collect();
        let order = by_class_id(&ids);
        self.scores
            .rows()
            .into_iter()
            .map(|row| ids[order[argmax(order.iter().map(|&j| row[unseen[j]]))]])
            .collect()
    }

    pub fn gzsl_predictions(&self, gamma: f64) -> Vec<u32> {
        self.scores
            .rows()
            .into_iter()
            .map(|row| {
                let row: Array1<f64> = row.to_owned();
                self.class_ids[calibrated_argmax(row.as_slice().expect("contiguous"), &self.class_ids, gamma, &self.seen_mask)]
            })
            .collect()
    }

    pub fn report(&self, dataset: &Dataset, mode: EvalMode, gamma: f64) -> Result<EvalReport> {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be finite and non-negative, got {gamma}")));
        }
        let unseen = dataset.unseen_classes();
        let seen = dataset.seen_classes();
        if !self.labels.iter().any(|l| unseen.contains(l)) {
            return Err(Error::Config("test split has no unseen-class samples".into()));
        }
        let czsl = self.czsl_predictions();
        let unseen_rows: Vec<usize> = (0..self.labels.len()).filter(|&i| unseen.contains(&self.labels[i])).collect();
        let (acc_czsl, czsl_per_class) = per_class_breakdown(
            &unseen_rows.iter().map(|&i| czsl[i]).collect::<Vec<_>>(),
            &unseen_rows.iter().map(|&i| self.labels[i]).collect::<Vec<_>>(),
            unseen,
        );

        let (preds, labels, per_class_acc, u, s, h) = match mode {
            EvalMode::Czsl => {
                let p: Vec<u32> = unseen_rows.iter().map(|&i| czsl[i]).collect();
                let l: Vec<u32> = unseen_rows.iter().map(|&i| self.labels[i]).collect();
                (p, l, czsl_per_class, None, None, None)
            }
            EvalMode::Gzsl => {
                let p = self.gzsl_predictions(gamma);
                let (u, mut per_class) = per_class_breakdown(&p, &self.labels, unseen);
                let (s, seen_per_class) = per_class_breakdown(&p, &self.labels, seen);
                per_class.extend(seen_per_class);
                (p, self.labels.clone(), per_class, Some(u), Some(s), Some(harmonic_mean(s, u)))
            }
        };
        let mut confusion: BTreeMap<(u32, u32), usize> = BTreeMap::new();
        for (&p, &y) in preds.iter().zip(&labels) {
            *confusion.entry((y, p)).or_default() += 1;
        }
        Ok(EvalReport {
            mode,
            gamma,
            acc_czsl,
            u,
            s,
            h,
            per_class_acc,
            confusion: confusion
                .into_iter()
                .map(|((label, predicted), count)| ConfusionEntry { label, predicted, count })
                .collect(),
            unseen_predictions: preds.iter().filter(|p| unseen.contains(p)).count(),
            test_samples: labels.len(),
        })
    }
}

/// Scale factor used at inference, taken from the checkpoint's training config.
pub fn checkpoint_alpha(checkpoint: &Checkpoint) -> f64 {
    checkpoint
        .train_config
        .as_ref()
        .map_or(crate::losses::LossWeights::default().alpha, |c| c.loss.alpha)
}

pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, mode: EvalMode, gamma: f64) -> Result<EvalReport> {
    Scorer::new(checkpoint, dataset, checkpoint_alpha(checkpoint))?.report(dataset, mode, gamma)
}

/// GZSL reports for each γ in `gammas`, sharing one forward pass.
pub fn gamma_sweep(checkpoint: &Checkpoint, dataset: &Dataset, gammas: &[f64]) -> Result<Vec<EvalReport>> {
    let scorer = Scorer::new(checkpoint, dataset, checkpoint_alpha(checkpoint))?;
    gammas.iter().map(|&g| scorer.report(dataset, EvalMode::Gzsl, g)).collect()
}

/// One exported attribute feature.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeFeature {
    /// Dataset-wide image index.
    pub image: usize,
    pub label: u32,
    pub attribute: usize,
    pub feature: Vec<f64>,
}

/// Attribute-pool entries over the test split: one row per (image, present
/// attribute), taking AF or EAF rows according to `source`.
pub fn test_attribute_features(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    source: FeatureSource,
) -> Result<Vec<AttributeFeature>> {
    let threshold = checkpoint
        .train_config
        .as_ref()
        .map_or(TrainConfig::default().presence_threshold, |c| c.presence_threshold);
    let norm = dataset.normalized_class_semantics();
    let axis = checkpoint.model.attention_softmax_axis;
    let mut out = Vec::new();
    for &i in dataset.test_indices() {
        let label = dataset.labels()[i];
        let row = dataset.class_index(label).expect("validated label");
        let fwd = model::forward(&dataset.feature_map(i), &checkpoint.params, axis)?;
        let semantics = norm.slice(ndarray::s![row..row + 1, ..]).to_owned();
        let pool = build_attribute_pool(std::slice::from_ref(&fwd), &semantics, threshold, source)?;
        out.extend(pool.entries.into_iter().map(|e| AttributeFeature {
            image: i,
            label,
            attribute: e.attribute_id,
            feature: e.feature.to_vec(),
        }));
    }
    Ok(out)
}

/// Inclusive range `start, start+step, …, ≤ end` with rounding slack.
pub fn gamma_range(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && start.is_finite() && end.is_finite() && start >= 0.0 && end >= start) {
        return Err(Error::Config(format!("invalid gamma range {start}:{end}:{step}")));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}
