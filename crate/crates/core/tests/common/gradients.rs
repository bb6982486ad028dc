//! Finite-difference checks for every loss, the attention path, the channel
//! encoder and the full objective.

use std::collections::BTreeMap;

use hdafl::autodiff::{Tape, Var};
use hdafl::dataset::{make_batch, Dataset, DatasetParts};
use hdafl::losses::{self, AalVariant};
use hdafl::model::{self, HeadParams, ModelConfig, SoftmaxAxis};
use hdafl::trainer::{compute_batch_loss, TrainConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradient_error, randn, relative_error, FD_STEP};

/// Worst relative error per component over `instances` random draws.
pub fn run(instances: usize, seed: u64) -> BTreeMap<&'static str, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut record = |name, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for _ in 0..instances {
        let k = rng.random_range(2..=4);
        let c = [4, 8][rng.random_range(0..2)];
        let b = rng.random_range(2..=4);
        record("classification", classification(&mut rng, b, c, k));
        record("mse_through_attention", mse_through_attention(&mut rng, k, c));
        record("alignment_verbatim", alignment(&mut rng, k, c, AalVariant::Verbatim));
        record("alignment_flipped", alignment(&mut rng, k, c, AalVariant::Flipped));
        record("attribute_contrastive", attribute_contrastive(&mut rng, k, c));
        record("class_contrastive", class_contrastive(&mut rng, b, c));
        record("attribute_features", attribute_features(&mut rng, k, c));
        record("discrimination_encoder", encoder(&mut rng, k, c));
        record("full_objective", full_objective(&mut rng));
    }
    worst
}

fn classification(rng: &mut ChaCha8Rng, b: usize, c: usize, m: usize) -> f64 {
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..m)).collect();
    let inputs = [randn(rng, b, c), randn(rng, m, c)];
    gradient_error(&inputs, &|t: &mut Tape, v: &[Var]| {
        losses::classification_loss_on(t, v[0], v[1], &labels, 25.0)
    })
}

/// Kernels and features through attention, max pooling and the MSE term.
fn mse_through_attention(rng: &mut ChaCha8Rng, k: usize, c: usize) -> f64 {
    let target = Array2::from_shape_simple_fn((1, k), || rng.random_range(0.0..1.0));
    let inputs = [randn(rng, 4, c), randn(rng, k, c)];
    gradient_error(&inputs, &|t: &mut Tape, v: &[Var]| {
        let att = model::attention_maps_on(t, v[0], v[1], SoftmaxAxis::Spatial);
        let a_hat = model::attribute_scores_on(t, att);
        losses::mse_loss_on(t, a_hat, &target)
    })
}

fn alignment(rng: &mut ChaCha8Rng, k: usize, c: usize, variant: AalVariant) -> f64 {
    let p = rng.random_range(2..=6);
    let ids: Vec<usize> = (0..p).map(|_| rng.random_range(0..k)).collect();
    let inputs = [randn(rng, p, c), randn(rng, k, c)];
    gradient_error(&inputs, &|t: &mut Tape, v: &[Var]| {
        losses::attribute_alignment_loss_on(t, v[0], v[1], &ids, variant, 0.1)
    })
}

fn attribute_contrastive(rng: &mut ChaCha8Rng, k: usize, c: usize) -> f64 {
    let n = rng.random_range(4..=8);
    let (feats, attrs, images) = super::random_pool(rng, n, c, k, 4);
    gradient_error(&[feats], &|t: &mut Tape, v: &[Var]| {
        losses::attribute_contrastive_loss_on(t, v[0], &attrs, &images, 0.32, 0.42, 0.3)
    })
}

fn class_contrastive(rng: &mut ChaCha8Rng, b: usize, c: usize) -> f64 {
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..2)).collect();
    let inputs = [randn(rng, b, c)];
    gradient_error(&inputs, &|t: &mut Tape, v: &[Var]| losses::class_contrastive_loss_on(t, v[0], &labels, 0.1))
}

/// Random linear functional `mean(X·r)` of a matrix-valued output.
fn project(t: &mut Tape, x: Var, r: &Array2<f64>) -> Var {
    let r = t.constant(r.clone());
    let y = t.matmul(x, r);
    t.mean_rows(y)
}

fn attribute_features(rng: &mut ChaCha8Rng, k: usize, c: usize) -> f64 {
    let r = randn(rng, c, 1);
    let inputs = [randn(rng, 4, c), randn(rng, k, c)];
    gradient_error(&inputs, &|t: &mut Tape, v: &[Var]| {
        let att = model::attention_maps_on(t, v[0], v[1], SoftmaxAxis::Spatial);
        let af = model::attribute_features_on(t, v[0], att);
        project(t, af, &r)
    })
}

/// Encoder input and every encoder weight.
fn encoder(rng: &mut ChaCha8Rng, k: usize, c: usize) -> f64 {
    let cfg = ModelConfig {
        hidden_width: 3,
        heads: 2,
        ..ModelConfig::new(k, c, 2, 2)
    };
    let template = HeadParams::init(&cfg, rng.random()).unwrap();
    let mut inputs = vec![randn(rng, k, c)];
    template.ade_for_each(|t| inputs.push(t.clone()));
    let r = randn(rng, c, 1);
    gradient_error(&inputs, &|t: &mut Tape, v: &[Var]| {
        let mut it = v[1..].iter().copied();
        let bound = template.map(&mut |name, _| {
            if name.starts_with("ade.") {
                it.next().expect("one var per encoder tensor")
            } else {
                v[0]
            }
        });
        let trace = model::ade_on(t, v[0], &bound.ade);
        project(t, trace.eaf, &r)
    })
}

/// Tiny dataset for the whole-objective check.
fn tiny_dataset(rng: &mut ChaCha8Rng) -> Dataset {
    let (h, w, c, k) = (2, 2, 4, 3);
    let classes = 3u32;
    let per_class = 2;
    let n = classes as usize * per_class;
    let features: Vec<f32> = (0..n * h * w * c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let labels: Vec<u32> = (0..n).map(|i| (i / per_class) as u32).collect();
    let class_semantics = Array2::from_shape_vec((3, k), vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
    Dataset::new(DatasetParts {
        grid: (h, w, c),
        features,
        labels,
        class_ids: vec![0, 1, 2],
        class_semantics,
        attribute_semantics: randn(rng, k, 2),
        seen: vec![0, 1],
        unseen: vec![2],
        train: (0..4).collect(),
        test: vec![4, 5],
    })
    .unwrap()
}

/// Every head parameter through the weighted sum of all five terms.
fn full_objective(rng: &mut ChaCha8Rng) -> f64 {
    let ds = tiny_dataset(rng);
    let config = TrainConfig {
        hidden_width: 5,
        heads: 2,
        ..TrainConfig::default()
    };
    let mcfg = config.model_config(&ds);
    let mut params = HeadParams::init(&mcfg, rng.random()).unwrap();
    let batch = make_batch(&ds, vec![0, 1, 2, 3]);
    let step = compute_batch_loss(&ds, &params, &batch, &config).unwrap();

    let mut sizes = Vec::new();
    params.for_each(&mut |_, t| sizes.push(t.dim()));
    let mut analytic = Vec::new();
    step.grads.for_each(&mut |_, g| analytic.push(g.clone()));

    let mut worst: f64 = 0.0;
    for (t, &dim) in sizes.iter().enumerate() {
        let mut numeric = Array2::zeros(dim);
        for idx in 0..dim.0 * dim.1 {
            let pos = (idx / dim.1, idx % dim.1);
            let shift = |delta: f64, params: &mut HeadParams| {
                let mut i = 0;
                params.for_each_mut(&mut |_, x| {
                    if i == t {
                        x[pos] += delta;
                    }
                    i += 1;
                });
            };
            shift(FD_STEP, &mut params);
            let up = compute_batch_loss(&ds, &params, &batch, &config).unwrap().total;
            shift(-2.0 * FD_STEP, &mut params);
            let down = compute_batch_loss(&ds, &params, &batch, &config).unwrap().total;
            shift(FD_STEP, &mut params);
            numeric[pos] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic[t], &numeric));
    }
    worst
}

trait AdeTensors {
    fn ade_for_each(&self, f: impl FnMut(&Array2<f64>));
}

impl AdeTensors for HeadParams {
    fn ade_for_each(&self, mut f: impl FnMut(&Array2<f64>)) {
        self.for_each(&mut |name, t| {
            if name.starts_with("ade.") {
                f(t)
            }
        });
    }
}
