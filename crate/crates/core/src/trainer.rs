//! Episodic SGD training of the head.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::{Checkpoint, TrainProgress};
use crate::dataset::{Batch, Dataset, EpisodeSampler, EpisodeSpec};
use crate::error::{Error, Result};
use crate::losses::{self, AalVariant, FeatureSource, LossComponents, LossWeights};
use crate::model::{self, HeadParams, ModelConfig, SoftmaxAxis};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub episode: EpisodeSpec,
    pub loss: LossWeights,
    /// Parameter initialization seed.
    pub init_seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Feed EAF (true) or AF (false) rows into the attribute pool.
    pub use_enhanced_features: bool,
    pub aal_variant: AalVariant,
    /// Margin used by [`AalVariant::Flipped`].
    pub aal_margin: f64,
    /// Normalized attribute value above which an attribute counts as present.
    pub presence_threshold: f64,
    pub attention_softmax_axis: SoftmaxAxis,
    pub hidden_width: usize,
    pub heads: usize,
    pub ff_multiplier: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-5,
            episode: EpisodeSpec::default(),
            loss: LossWeights::default(),
            init_seed: 0,
            checkpoint_dir: None,
            use_enhanced_features: true,
            aal_variant: AalVariant::Verbatim,
            aal_margin: 0.0,
            presence_threshold: 0.5,
            attention_softmax_axis: SoftmaxAxis::Spatial,
            hidden_width: ModelConfig::DEFAULT_HIDDEN_WIDTH,
            heads: ModelConfig::DEFAULT_HEADS,
            ff_multiplier: ModelConfig::DEFAULT_FF_MULTIPLIER,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !self.aal_margin.is_finite() || !self.presence_threshold.is_finite() {
            return Err(Error::Config("aal_margin and presence_threshold must be finite".into()));
        }
        self.loss.validate()
    }

    /// Architecture for a dataset's dimensions.
    pub fn model_config(&self, dataset: &Dataset) -> ModelConfig {
        let (_, _, c) = dataset.grid();
        ModelConfig {
            num_attributes: dataset.num_attributes(),
            channels: c,
            class_semantic_dim: dataset.class_semantics().ncols(),
            attribute_semantic_dim: dataset.attribute_semantics().ncols(),
            hidden_width: self.hidden_width,
            heads: self.heads,
            ff_multiplier: self.ff_multiplier,
            attention_softmax_axis: self.attention_softmax_axis,
        }
    }

    pub fn feature_source(&self) -> FeatureSource {
        FeatureSource::from_enhanced(self.use_enhanced_features)
    }
}

/// One row of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub episode: usize,
    pub components: LossComponents,
    pub total: f64,
}

/// Classic momentum step on one tensor:
/// `v ← m·v + g + wd·p`, `p ← p − lr·v`.
pub fn sgd_update(
    param: &mut Array2<f64>,
    grad: &Array2<f64>,
    velocity: &mut Array2<f64>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    ndarray::Zip::from(param)
        .and(grad)
        .and(velocity)
        .for_each(|p, &g, v| {
            *v = momentum * *v + g + weight_decay * *p;
            *p -= lr * *v;
        });
}

/// Applies [`sgd_update`] to every tensor of the head.
pub fn sgd_step(
    params: &mut HeadParams,
    grads: &HeadParams,
    velocity: &mut HeadParams,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut flat_grads = Vec::new();
    grads.for_each(&mut |name, g| flat_grads.push((name.to_string(), g)));
    if let Some((name, _)) = flat_grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric(format!("non-finite gradient in `{name}`")));
    }
    let mut flat_vel = Vec::new();
    velocity.for_each_mut(&mut |_, v| flat_vel.push(std::mem::take(v)));
    let mut i = 0;
    let mut mismatch = None;
    params.for_each_mut(&mut |name, p| {
        let g = flat_grads[i].1;
        let v = &mut flat_vel[i];
        if p.dim() != g.dim() || p.dim() != v.dim() {
            mismatch.get_or_insert(name.to_string());
        } else {
            sgd_update(p, g, v, lr, momentum, weight_decay);
        }
        i += 1;
    });
    let mut restored = flat_vel.into_iter();
    velocity.for_each_mut(&mut |_, v| *v = restored.next().expect("same traversal"));
    match mismatch {
        Some(name) => Err(Error::Shape(format!("gradient/state shape mismatch for `{name}`"))),
        None => Ok(()),
    }
}

/// Loss components and gradients for one batch.
pub struct StepResult {
    pub components: LossComponents,
    pub total: f64,
    pub grads: HeadParams,
}

/// Forward and backward pass of the full objective on one batch.
pub fn compute_batch_loss(
    dataset: &Dataset,
    params: &HeadParams,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<StepResult> {
    let w = &config.loss;
    let targets = normalized_rows(dataset, batch);
    let k = dataset.num_attributes();

    let mut tape = Tape::new();
    let p = params.bind(&mut tape);

    let class_sem = tape.constant(dataset.class_semantics().clone());
    let cp = model::encode_on(&mut tape, class_sem, &p.class_encoder);
    let attr_sem = tape.constant(dataset.attribute_semantics().clone());
    let ap = model::encode_on(&mut tape, attr_sem, &p.attr_encoder);

    let mut h_rows = Vec::with_capacity(batch.len());
    let mut score_rows = Vec::with_capacity(batch.len());
    let mut feature_blocks = Vec::with_capacity(batch.len());
    for f in &batch.feature_maps {
        let fv = tape.constant(f.clone());
        let out = model::forward_on(&mut tape, fv, &p, config.attention_softmax_axis);
        h_rows.push(out.h_x);
        score_rows.push(out.a_hat);
        feature_blocks.push(match config.feature_source() {
            FeatureSource::Enhanced => out.eaf,
            FeatureSource::Raw => out.af,
        });
    }
    let h = tape.concat_rows(&h_rows);
    let a_hat = tape.concat_rows(&score_rows);

    let class_rows: Vec<usize> = batch
        .labels
        .iter()
        .map(|l| dataset.class_index(*l).expect("validated label"))
        .collect();
    let l_cls = losses::classification_loss_on(&mut tape, h, cp, &class_rows, w.alpha);
    let l_mse = losses::mse_loss_on(&mut tape, a_hat, &targets);
    let l_ccl = losses::class_contrastive_loss_on(&mut tape, h, &class_rows, w.tau_class);

    let present = losses::present_attributes(&targets, config.presence_threshold);
    let (l_aal, l_acl) = if present.is_empty() {
        log::warn!("attribute pool is empty; alignment and contrastive losses are zero for this batch");
        let zero = tape.constant(Array2::zeros((1, 1)));
        (zero, zero)
    } else {
        let stacked = tape.concat_rows(&feature_blocks);
        let rows: Vec<usize> = present.iter().map(|&(i, j)| i * k + j).collect();
        let attrs: Vec<usize> = present.iter().map(|&(_, j)| j).collect();
        let images: Vec<usize> = present.iter().map(|&(i, _)| i).collect();
        let pool = tape.select_rows(stacked, &rows);
        let aal = losses::attribute_alignment_loss_on(&mut tape, pool, ap, &attrs, config.aal_variant, config.aal_margin);
        let acl = losses::attribute_contrastive_loss_on(&mut tape, pool, &attrs, &images, w.mu, w.epsilon, w.tau_attr);
        (aal, acl)
    };

    let total = tape.weighted_sum(&[
        (l_cls, 1.0),
        (l_mse, w.lambda_mse),
        (l_aal, w.lambda_aal),
        (l_acl, w.lambda_acl),
        (l_ccl, w.lambda_ccl),
    ]);
    let components = LossComponents {
        cls: tape.scalar(l_cls),
        mse: tape.scalar(l_mse),
        aal: tape.scalar(l_aal),
        acl: tape.scalar(l_acl),
        ccl: tape.scalar(l_ccl),
    };
    let total_value = tape.scalar(total);
    if !total_value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {components:?}")));
    }
    let g = tape.backward(total);
    let grads = p.map(&mut |_, v| g.get_or_zeros(*v, tape.shape(*v)));
    Ok(StepResult {
        components,
        total: total_value,
        grads,
    })
}

fn normalized_rows(dataset: &Dataset, batch: &Batch) -> Array2<f64> {
    let norm = dataset.normalized_class_semantics();
    let mut out = Array2::zeros(batch.attribute_rows.dim());
    for (mut row, l) in out.rows_mut().into_iter().zip(&batch.labels) {
        row.assign(&norm.row(dataset.class_index(*l).expect("validated label")));
    }
    out
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<LossRecord>,
}

pub fn epoch_checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("final.ckpt")
}

/// Trains from a fresh initialization.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_from(dataset, config, None)
}

/// Trains, optionally continuing from a checkpoint's parameters, momentum
/// and epoch counter. Epoch `e` always draws its episodes from random stream
/// `e`, so a resumed run sees the same batches as an uninterrupted one.
pub fn train_from(dataset: &Dataset, config: &TrainConfig, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    config.validate()?;
    config.episode.validate(dataset)?;
    let model_config = config.model_config(dataset);
    model_config.validate()?;

    let (mut params, mut velocity, mut progress) = match resume {
        Some(ck) => {
            if ck.model != model_config {
                return Err(Error::Config(
                    "checkpoint architecture does not match dataset/config".into(),
                ));
            }
            let velocity = ck.velocity.unwrap_or_else(|| ck.params.map(&mut |_, t| Array2::zeros(t.dim())));
            (ck.params, velocity, ck.progress)
        }
        None => {
            let params = HeadParams::init(&model_config, config.init_seed)?;
            let velocity = params.map(&mut |_, t| Array2::zeros(t.dim()));
            (params, velocity, TrainProgress::default())
        }
    };

    let per_epoch = config.episode.episodes_per_epoch(dataset);
    let mut trace = Vec::new();
    let snapshot = |params: &HeadParams, velocity: &HeadParams, progress: TrainProgress| Checkpoint {
        model: model_config.clone(),
        params: params.clone(),
        velocity: Some(velocity.clone()),
        progress,
        train_config: Some(config.clone()),
    };

    for epoch in progress.epochs_completed..config.epochs {
        let mut sampler = EpisodeSampler::with_stream(dataset, config.episode, epoch as u64)?;
        for _ in 0..per_epoch {
            let batch = sampler.next_batch()?;
            let step = compute_batch_loss(dataset, &params, &batch, config)?;
            sgd_step(
                &mut params,
                &step.grads,
                &mut velocity,
                config.learning_rate,
                config.momentum,
                config.weight_decay,
            )?;
            trace.push(LossRecord {
                episode: progress.episodes_completed,
                components: step.components,
                total: step.total,
            });
            progress.episodes_completed += 1;
        }
        progress.epochs_completed = epoch + 1;
        log::info!(
            "epoch {}/{} done, last total loss {:.4}",
            epoch + 1,
            config.epochs,
            trace.last().map_or(f64::NAN, |r| r.total)
        );
        if let Some(dir) = &config.checkpoint_dir {
            snapshot(&params, &velocity, progress).save(epoch_checkpoint_path(dir, epoch + 1))?;
        }
    }

    let checkpoint = snapshot(&params, &velocity, progress);
    if let Some(dir) = &config.checkpoint_dir {
        checkpoint.save(final_checkpoint_path(dir))?;
    }
    Ok(TrainOutcome { checkpoint, trace })
}

/// Writes `episode,L_cls,L_mse,L_aal,L_acl,L_ccl,total`.
pub fn write_loss_trace(path: impl AsRef<Path>, trace: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Load {
        name: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let io_err = |e: csv::Error| Error::Load {
        name: path.display().to_string(),
        reason: e.to_string(),
    };
    w.write_record(["episode", "L_cls", "L_mse", "L_aal", "L_acl", "L_ccl", "total"])
        .map_err(io_err)?;
    for r in trace {
        let c = &r.components;
        w.write_record([
            r.episode.to_string(),
            c.cls.to_string(),
            c.mse.to_string(),
            c.aal.to_string(),
            c.acl.to_string(),
            c.ccl.to_string(),
            r.total.to_string(),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
