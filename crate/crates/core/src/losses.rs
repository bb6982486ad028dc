//! Training objectives.
//!
//! Each loss is split into a pure scoring function over a similarity (or
//! logit) matrix that returns its value together with the exact gradient,
//! and a tape-level wrapper that computes the cosine matrix on a
//! [`Tape`](crate::autodiff::Tape) and attaches the scoring function as a
//! scalar node. The value-level functions at the bottom of the module wrap
//! the tape versions for one-off evaluation.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::ForwardOut;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_mse: f64,
    pub lambda_aal: f64,
    pub lambda_acl: f64,
    pub lambda_ccl: f64,
    /// Cosine logit scale.
    pub alpha: f64,
    pub tau_attr: f64,
    pub tau_class: f64,
    /// Fraction of easiest positives dropped per anchor.
    pub mu: f64,
    /// Fraction of easiest negatives dropped per anchor.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mse: 1.0,
            lambda_aal: 0.1,
            lambda_acl: 1.0,
            lambda_ccl: 1.0,
            alpha: 25.0,
            tau_attr: 0.3,
            tau_class: 0.1,
            mu: 0.32,
            epsilon: 0.42,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_mse, self.lambda_aal, self.lambda_acl, self.lambda_ccl];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if !(self.tau_attr > 0.0 && self.tau_class > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        for (name, v) in [("mu", self.mu), ("epsilon", self.epsilon)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Form of the attribute alignment term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AalVariant {
    /// `ReLU(cos(af, ap_j) − 0.5·min_{j'≠j} cos(af, ap_j'))`
    #[default]
    Verbatim,
    /// `ReLU(0.5·min_{j'≠j} cos(af, ap_j') − cos(af, ap_j) + margin)`
    Flipped,
}

/// Which per-image attribute features feed the pool.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Raw,
    #[default]
    Enhanced,
}

impl FeatureSource {
    pub fn from_enhanced(use_enhanced: bool) -> Self {
        if use_enhanced {
            FeatureSource::Enhanced
        } else {
            FeatureSource::Raw
        }
    }
}

/// Ranking direction for hard-sample mining.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MiningDirection {
    /// Positives: rank by similarity descending, drop the most similar.
    DropMostSimilar,
    /// Negatives: rank by similarity ascending, drop the least similar.
    DropLeastSimilar,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub mse: f64,
    pub aal: f64,
    pub acl: f64,
    pub ccl: f64,
}

/// `L_cls + λ1 L_mse + λ2 L_aal + λ3 L_acl + λ4 L_ccl`
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    c.cls + w.lambda_mse * c.mse + w.lambda_aal * c.aal + w.lambda_acl * c.acl + w.lambda_ccl * c.ccl
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub feature: Array1<f64>,
    pub attribute_id: usize,
    pub image_id: usize,
}

/// Attribute features retained for the images that possess them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttributePool {
    pub entries: Vec<PoolEntry>,
}

impl AttributePool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn attribute_ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.attribute_id).collect()
    }

    pub fn image_ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.image_id).collect()
    }

    /// Entries stacked as a P×C matrix.
    pub fn features(&self) -> Array2<f64> {
        let c = self.entries.first().map_or(0, |e| e.feature.len());
        let mut out = Array2::zeros((self.entries.len(), c));
        for (mut row, e) in out.rows_mut().into_iter().zip(&self.entries) {
            row.assign(&e.feature);
        }
        out
    }
}

/// `(image, attribute)` pairs whose ground-truth value exceeds `threshold`,
/// image-major.
pub fn present_attributes(attribute_rows: &Array2<f64>, threshold: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, row) in attribute_rows.rows().into_iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v > threshold {
                out.push((i, j));
            }
        }
    }
    out
}

/// Builds the pool from per-image forward outputs and their normalized
/// ground-truth attribute rows (B×K).
pub fn build_attribute_pool(
    outs: &[ForwardOut],
    attribute_rows: &Array2<f64>,
    presence_threshold: f64,
    source: FeatureSource,
) -> Result<AttributePool> {
    if outs.len() != attribute_rows.nrows() {
        return Err(Error::Shape(format!(
            "{} forward outputs but {} attribute rows",
            outs.len(),
            attribute_rows.nrows()
        )));
    }
    let entries: Vec<_> = present_attributes(attribute_rows, presence_threshold)
        .into_iter()
        .map(|(i, j)| {
            let m = match source {
                FeatureSource::Raw => &outs[i].af,
                FeatureSource::Enhanced => &outs[i].eaf,
            };
            PoolEntry {
                feature: m.row(j).to_owned(),
                attribute_id: j,
                image_id: i,
            }
        })
        .collect();
    if entries.is_empty() {
        log::warn!("attribute pool is empty; alignment and contrastive losses are zero for this batch");
    }
    Ok(AttributePool { entries })
}

/// Indices (ascending) that survive dropping the `⌊fraction·n⌋` easiest
/// candidates. Ties keep their original order.
pub fn retain_hard(similarities: &[f64], fraction: f64, direction: MiningDirection) -> Vec<usize> {
    let n = similarities.len();
    let drop = (fraction * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ord = similarities[a].total_cmp(&similarities[b]);
        match direction {
            MiningDirection::DropMostSimilar => ord.reverse(),
            MiningDirection::DropLeastSimilar => ord,
        }
    });
    let mut kept: Vec<usize> = order.into_iter().skip(drop.min(n.saturating_sub(1))).collect();
    kept.sort_unstable();
    kept
}

/// Cosine similarity with the norm floor applied to each vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::autodiff::NORM_FLOOR);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::autodiff::NORM_FLOOR);
    dot / (na * nb)
}

/// Hard-sample selection for one anchor against a candidate list.
pub fn mine_hard_samples(
    anchor: &[f64],
    candidates: &[Array1<f64>],
    fraction: f64,
    direction: MiningDirection,
) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("mining fraction must lie in [0, 1), got {fraction}")));
    }
    let sims: Vec<f64> = candidates
        .iter()
        .map(|c| cosine(anchor, c.as_slice().expect("contiguous candidate")))
        .collect();
    Ok(retain_hard(&sims, fraction, direction))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy over rows of a B×M logit matrix, with gradient.
pub fn cross_entropy_scores(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let b = logits.nrows();
    let mut grad = Array2::zeros(logits.dim());
    if b == 0 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        // (m − z_y) + ln(1 + Σ_{j≠argmax} e^{z_j − m}) keeps precision when the
        // target logit dominates.
        let (arg, m) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(a, m), (j, &z)| if z > m { (j, z) } else { (a, m) });
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != arg)
            .map(|(_, &z)| (z - m).exp())
            .sum();
        let lse = m + rest.ln_1p();
        total += (m - row[labels[i]]) + rest.ln_1p();
        for (j, &z) in row.iter().enumerate() {
            grad[[i, j]] = (z - lse).exp() / b as f64;
        }
        grad[[i, labels[i]]] -= 1.0 / b as f64;
    }
    (total / b as f64, grad)
}

/// Summed alignment terms over a P×K cosine matrix, with gradient.
pub fn alignment_scores(
    cos: &Array2<f64>,
    attribute_ids: &[usize],
    variant: AalVariant,
    margin: f64,
) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(cos.dim());
    let k = cos.ncols();
    if k < 2 {
        if !attribute_ids.is_empty() {
            log::warn!("alignment loss needs at least two attributes; returning 0");
        }
        return (0.0, grad);
    }
    let mut total = 0.0;
    for (r, &j) in attribute_ids.iter().enumerate() {
        let own = cos[[r, j]];
        let (mut arg, mut min) = (usize::MAX, f64::INFINITY);
        for jp in (0..k).filter(|&jp| jp != j) {
            if cos[[r, jp]] < min {
                min = cos[[r, jp]];
                arg = jp;
            }
        }
        let (t, d_own, d_min) = match variant {
            AalVariant::Verbatim => (own - 0.5 * min, 1.0, -0.5),
            AalVariant::Flipped => (0.5 * min - own + margin, -1.0, 0.5),
        };
        if t > 0.0 {
            total += t;
            grad[[r, j]] += d_own;
            grad[[r, arg]] += d_min;
        }
    }
    (total, grad)
}

/// Hard-mined attribute contrastive loss over a P×P cosine matrix.
///
/// Returns the loss, its gradient and the number of anchors that had at
/// least one retained positive.
pub fn attribute_contrastive_scores(
    sim: &Array2<f64>,
    attribute_ids: &[usize],
    image_ids: &[usize],
    mu: f64,
    epsilon: f64,
    tau: f64,
) -> (f64, Array2<f64>, usize) {
    let p = attribute_ids.len();
    let mut grad = Array2::zeros((p, p));
    let mut total = 0.0;
    let mut anchors: Vec<(usize, Vec<usize>, Vec<usize>, f64)> = Vec::new();
    for r in 0..p {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for s in 0..p {
            if attribute_ids[s] == attribute_ids[r] {
                if image_ids[s] != image_ids[r] {
                    pos.push(s);
                }
            } else {
                neg.push(s);
            }
        }
        if pos.is_empty() {
            continue;
        }
        let pos_sims: Vec<f64> = pos.iter().map(|&s| sim[[r, s]]).collect();
        let neg_sims: Vec<f64> = neg.iter().map(|&s| sim[[r, s]]).collect();
        let pos: Vec<usize> = retain_hard(&pos_sims, mu, MiningDirection::DropMostSimilar)
            .into_iter()
            .map(|i| pos[i])
            .collect();
        let neg: Vec<usize> = retain_hard(&neg_sims, epsilon, MiningDirection::DropLeastSimilar)
            .into_iter()
            .map(|i| neg[i])
            .collect();
        let lse = log_sum_exp(pos.iter().chain(&neg).map(|&s| sim[[r, s]] / tau));
        let u = pos.len() as f64;
        let term = lse - pos.iter().map(|&s| sim[[r, s]] / tau).sum::<f64>() / u;
        total += term;
        anchors.push((r, pos, neg, lse));
    }
    let count = anchors.len();
    if count == 0 {
        if p > 0 {
            log::warn!("no pool entry has a positive; attribute contrastive loss is 0");
        }
        return (0.0, grad, 0);
    }
    let inv = 1.0 / count as f64;
    for (r, pos, neg, lse) in anchors {
        let u = pos.len() as f64;
        for &s in pos.iter().chain(&neg) {
            grad[[r, s]] += inv * (sim[[r, s]] / tau - lse).exp() / tau;
        }
        for &s in &pos {
            grad[[r, s]] -= inv / (u * tau);
        }
    }
    (total * inv, grad, count)
}

/// Supervised contrastive loss over a B×B cosine matrix of global features.
pub fn class_contrastive_scores(sim: &Array2<f64>, labels: &[usize], tau: f64) -> (f64, Array2<f64>) {
    let b = labels.len();
    let mut grad = Array2::zeros((b, b));
    if b < 2 {
        log::warn!("class contrastive loss needs a batch of at least 2; returning 0");
        return (0.0, grad);
    }
    let inv_b = 1.0 / b as f64;
    let mut total = 0.0;
    for i in 0..b {
        let positives: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let n_pos = positives.len() as f64;
        let lse = log_sum_exp((0..b).filter(|&a| a != i).map(|a| sim[[i, a]] / tau));
        let mean_pos = positives.iter().map(|&p| sim[[i, p]] / tau).sum::<f64>() / n_pos;
        total += lse - mean_pos;
        for a in (0..b).filter(|&a| a != i) {
            grad[[i, a]] += inv_b * (sim[[i, a]] / tau - lse).exp() / tau;
        }
        for &p in &positives {
            grad[[i, p]] -= inv_b / (n_pos * tau);
        }
    }
    (total * inv_b, grad)
}

/// Mean over rows of `‖â − a‖²`, with gradient.
pub fn squared_error_scores(pred: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    let b = pred.nrows().max(1) as f64;
    let diff = pred - target;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / b;
    (value, diff * (2.0 / b))
}

/// Row-normalized `a·bᵀ` on the tape.
pub fn cosine_matrix_on(tape: &mut Tape, a: Var, b: Var) -> Var {
    let an = tape.normalize_rows(a);
    let bn = if a == b { an } else { tape.normalize_rows(b) };
    let bt = tape.transpose(bn);
    tape.matmul(an, bt)
}

pub fn classification_loss_on(tape: &mut Tape, h: Var, cp: Var, labels: &[usize], alpha: f64) -> Var {
    let cos = cosine_matrix_on(tape, h, cp);
    let logits = tape.scale(cos, alpha);
    let (value, grad) = cross_entropy_scores(tape.value(logits), labels);
    tape.scalar_fn(logits, value, grad)
}

/// Batch mean of the per-image squared attribute error.
pub fn mse_loss_on(tape: &mut Tape, a_hat: Var, targets: &Array2<f64>) -> Var {
    let (value, grad) = squared_error_scores(tape.value(a_hat), targets);
    tape.scalar_fn(a_hat, value, grad)
}

pub fn attribute_alignment_loss_on(
    tape: &mut Tape,
    features: Var,
    ap: Var,
    attribute_ids: &[usize],
    variant: AalVariant,
    margin: f64,
) -> Var {
    let cos = cosine_matrix_on(tape, features, ap);
    let (value, grad) = alignment_scores(tape.value(cos), attribute_ids, variant, margin);
    tape.scalar_fn(cos, value, grad)
}

pub fn attribute_contrastive_loss_on(
    tape: &mut Tape,
    features: Var,
    attribute_ids: &[usize],
    image_ids: &[usize],
    mu: f64,
    epsilon: f64,
    tau: f64,
) -> Var {
    let sim = cosine_matrix_on(tape, features, features);
    let (value, grad, _) = attribute_contrastive_scores(tape.value(sim), attribute_ids, image_ids, mu, epsilon, tau);
    tape.scalar_fn(sim, value, grad)
}

pub fn class_contrastive_loss_on(tape: &mut Tape, h: Var, labels: &[usize], tau: f64) -> Var {
    let sim = cosine_matrix_on(tape, h, h);
    let (value, grad) = class_contrastive_scores(tape.value(sim), labels, tau);
    tape.scalar_fn(sim, value, grad)
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Shape(format!("label {bad} out of range for {classes} prototypes")));
    }
    Ok(())
}

/// Cosine-softmax cross-entropy of global features against class prototypes.
pub fn classification_loss(h_batch: &Array2<f64>, cp: &Array2<f64>, labels: &[usize], alpha: f64) -> Result<f64> {
    check_labels(labels, h_batch.nrows(), cp.nrows())?;
    if h_batch.ncols() != cp.ncols() {
        return Err(Error::Shape("feature and prototype widths differ".into()));
    }
    let mut tape = Tape::new();
    let h = tape.constant(h_batch.clone());
    let c = tape.constant(cp.clone());
    let l = classification_loss_on(&mut tape, h, c, labels, alpha);
    Ok(tape.scalar(l))
}

/// `‖â − a_y‖²` for one image.
pub fn mse_attribute_loss(a_hat: &Array1<f64>, a_y: &Array1<f64>) -> Result<f64> {
    if a_hat.len() != a_y.len() {
        return Err(Error::Shape(format!(
            "attribute score length {} vs ground truth {}",
            a_hat.len(),
            a_y.len()
        )));
    }
    Ok(a_hat.iter().zip(a_y).map(|(p, t)| (p - t) * (p - t)).sum())
}

pub fn attribute_alignment_loss(pool: &AttributePool, ap: &Array2<f64>, variant: AalVariant, margin: f64) -> Result<f64> {
    if pool.is_empty() {
        return Ok(0.0);
    }
    let feats = pool.features();
    if feats.ncols() != ap.ncols() {
        return Err(Error::Shape("pool feature and prototype widths differ".into()));
    }
    let ids = pool.attribute_ids();
    if ids.iter().any(|&j| j >= ap.nrows()) {
        return Err(Error::Shape("pool attribute id exceeds prototype count".into()));
    }
    let mut tape = Tape::new();
    let f = tape.constant(feats);
    let a = tape.constant(ap.clone());
    let l = attribute_alignment_loss_on(&mut tape, f, a, &ids, variant, margin);
    Ok(tape.scalar(l))
}

pub fn attribute_contrastive_loss(pool: &AttributePool, mu: f64, epsilon: f64, tau: f64) -> Result<f64> {
    for (name, v) in [("mu", mu), ("epsilon", epsilon)] {
        if !(0.0..1.0).contains(&v) {
            return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
        }
    }
    if pool.is_empty() {
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let f = tape.constant(pool.features());
    let l = attribute_contrastive_loss_on(&mut tape, f, &pool.attribute_ids(), &pool.image_ids(), mu, epsilon, tau);
    Ok(tape.scalar(l))
}

pub fn class_contrastive_loss(h_batch: &Array2<f64>, labels: &[usize], tau: f64) -> Result<f64> {
    if labels.len() != h_batch.nrows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), h_batch.nrows())));
    }
    let mut tape = Tape::new();
    let h = tape.constant(h_batch.clone());
    let l = class_contrastive_loss_on(&mut tape, h, labels, tau);
    Ok(tape.scalar(l))
}
