//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hdafl::checkpoint::Checkpoint;
use hdafl::dataset::{generate_synthetic, Dataset, EpisodeSampler, EpisodeSpec, SynthSpec};
use hdafl::eval::{self, EvalMode};
use hdafl::losses::{self, AalVariant, AttributePool, PoolEntry};
use hdafl::model::{self, AdeParams, HeadParams, ModelConfig, SoftmaxAxis};
use hdafl::trainer::{self, TrainConfig};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADIENT_INSTANCES: usize = 25;
const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
const ORACLE_POOLS: usize = 1000;
const ORACLE_TOLERANCE: f64 = 1e-10;
const SUPCON_TOLERANCE: f64 = 1e-12;
const SOFTMAX_TOLERANCE: f64 = 1e-6;
const E2E_EPISODE_LIMIT: usize = 200;
const E2E_BUDGET: Duration = Duration::from_secs(300);
const E2E_MIN_CZSL: f64 = 66.0;
const SAMPLER_EPISODES: usize = 10_000;
const UNIFORMITY: f64 = 0.05;

struct Report {
    failures: usize,
}

impl Report {
    fn check(&mut self, criterion: &str, ok: bool, detail: String) {
        println!("{} criterion {criterion}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failures += 1;
        }
    }
}

fn pool_of(feats: &Array2<f64>, attrs: &[usize], images: &[usize]) -> AttributePool {
    AttributePool {
        entries: (0..attrs.len())
            .map(|i| PoolEntry {
                feature: feats.row(i).to_owned(),
                attribute_id: attrs[i],
                image_id: images[i],
            })
            .collect(),
    }
}

fn gradients(r: &mut Report) {
    let start = Instant::now();
    let worst = common::gradients::run(GRADIENT_INSTANCES, 2024);
    let elapsed = start.elapsed();
    let max = worst.values().copied().fold(0.0, f64::max);
    let summary: Vec<String> = worst.iter().map(|(k, v)| format!("{k}={v:.1e}")).collect();
    r.check(
        "1 (gradients)",
        max < common::FD_TOLERANCE && elapsed < GRADIENT_BUDGET,
        format!(
            "{} components x {GRADIENT_INSTANCES} instances, worst rel. err {max:.2e} < {:.0e}, {:.1}s < {}s [{}]",
            worst.len(),
            common::FD_TOLERANCE,
            elapsed.as_secs_f64(),
            GRADIENT_BUDGET.as_secs(),
            summary.join(" ")
        ),
    );
}

fn mining_oracle(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for _ in 0..ORACLE_POOLS {
        let n = rng.random_range(1..=8);
        let c = rng.random_range(2..=6);
        let k = rng.random_range(1..=4);
        let images = rng.random_range(2..=4);
        let n = n.min(k * images);
        let (feats, attrs, imgs) = common::random_pool(&mut rng, n, c, k, images);
        let mu = rng.random_range(0.0..1.0);
        let eps = rng.random_range(0.0..1.0);
        let tau = rng.random_range(0.05..1.0);
        let got = losses::attribute_contrastive_loss(&pool_of(&feats, &attrs, &imgs), mu, eps, tau).unwrap();
        let want = common::attribute_contrastive(&feats, &attrs, &imgs, mu, eps, tau);
        worst = worst.max((got - want).abs());
    }
    let mut worst_supcon: f64 = 0.0;
    for _ in 0..ORACLE_POOLS {
        let n = rng.random_range(2..=8);
        let (feats, attrs, imgs) = common::random_pool(&mut rng, n, 6, 3, 4);
        let got = losses::attribute_contrastive_loss(&pool_of(&feats, &attrs, &imgs), 0.0, 0.0, 0.3).unwrap();
        let (sum, anchors) = common::supcon(&feats, &attrs, 0.3);
        let want = if anchors == 0 { 0.0 } else { sum / anchors as f64 };
        worst_supcon = worst_supcon.max((got - want).abs());
    }
    r.check(
        "2 (mining oracle)",
        worst < ORACLE_TOLERANCE && worst_supcon < SUPCON_TOLERANCE,
        format!(
            "{ORACLE_POOLS} pools, max |diff| {worst:.1e} < {ORACLE_TOLERANCE:.0e}; unmined vs supervised contrastive {worst_supcon:.1e} < {SUPCON_TOLERANCE:.0e}"
        ),
    );
}

fn metric_fidelity(r: &mut Report) {
    let sun = eval::harmonic_mean(48.3, 41.9);
    let cub = eval::harmonic_mean(70.1, 78.9);
    r.check(
        "3 (harmonic mean)",
        (sun - 44.9).abs() <= 0.05 && (cub - 74.3).abs() <= 0.15,
        format!("H(48.3, 41.9) = {sun:.3} (44.9 +/- 0.05); H(70.1, 78.9) = {cub:.3} (74.3 +/- 0.15)"),
    );
}

fn calibrated_stacking(r: &mut Report, ckpt: &Checkpoint, ds: &Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let m = rng.random_range(2..=12);
        let d = rng.random_range(2..=8);
        let h: Vec<f64> = common::randn(&mut rng, 1, d).into_raw_vec_and_offset().0;
        let cp = common::randn(&mut rng, m, d);
        let ids: Vec<u32> = (0..m as u32).collect();
        let seen: Vec<bool> = (0..m).map(|_| rng.random()).collect();
        let scores: Vec<f64> = (0..m).map(|j| 25.0 * common::cos(&h, &cp.row(j).to_vec())).collect();
        let argmax = (0..m).fold(0, |b, j| if scores[j] > scores[b] { j } else { b });
        let got = eval::gzsl_predict(ndarray::ArrayView1::from(&h), &cp, &ids, 25.0, 0.0, &seen);
        if got != ids[argmax] {
            mismatches += 1;
        }
    }
    let gammas: Vec<f64> = (0..=20).map(|i| i as f64 / 10.0).collect();
    let counts: Vec<usize> = eval::gamma_sweep(ckpt, ds, &gammas)
        .unwrap()
        .iter()
        .map(|rep| rep.unseen_predictions)
        .collect();
    let monotone = counts.windows(2).all(|w| w[0] <= w[1]);
    r.check(
        "4 (calibrated stacking)",
        mismatches == 0 && monotone,
        format!("gamma=0 argmax mismatches {mismatches}/1000; unseen predictions over gamma 0..2 step 0.1: {counts:?}"),
    );
}

fn structural(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut softmax_dev: f64 = 0.0;
    let mut identity_exact = true;
    let mut bytes_stable = true;
    let mut forward_equal = true;
    for trial in 0..25 {
        let k = rng.random_range(1..=4);
        let c = [4, 8][trial % 2];
        let (hh, ww) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let f = common::randn(&mut rng, hh * ww, c).into_shape_with_order((hh, ww, c)).unwrap();
        let kernels = common::randn(&mut rng, k, c) * 3.0;
        let att = model::attention_maps(&f, &kernels, SoftmaxAxis::Spatial).unwrap();
        for j in 0..k {
            softmax_dev = softmax_dev.max((att.index_axis(Axis(2), j).sum() - 1.0).abs());
        }

        let af = common::randn(&mut rng, k, c);
        let mut ade = AdeParams::init(&mut rng, c, 2, 4 * c);
        ade.zero_residual_branches();
        identity_exact &= model::attribute_discrimination_encode(&af, &ade).unwrap() == af;

        let cfg = ModelConfig {
            hidden_width: 6,
            heads: 2,
            ..ModelConfig::new(k, c, 3, 2)
        };
        let ckpt = Checkpoint::new(cfg.clone(), HeadParams::init(&cfg, rng.random()).unwrap());
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        bytes_stable &= back.to_bytes() == bytes;
        forward_equal &= model::forward(&f, &ckpt.params, SoftmaxAxis::Spatial).unwrap()
            == model::forward(&f, &back.params, SoftmaxAxis::Spatial).unwrap();
    }
    r.check(
        "5 (structural invariants)",
        softmax_dev <= SOFTMAX_TOLERANCE && identity_exact && bytes_stable && forward_equal,
        format!(
            "max |sum att - 1| {softmax_dev:.1e} <= {SOFTMAX_TOLERANCE:.0e}; residual identity exact: {identity_exact}; checkpoint bytes stable: {bytes_stable}; forward identical: {forward_equal}"
        ),
    );
}

fn e2e_dataset() -> Dataset {
    generate_synthetic(&SynthSpec {
        n_seen: 10,
        n_unseen: 3,
        num_attributes: 12,
        channels: 64,
        height: 7,
        width: 7,
        images_per_class: 20,
        noise_scale: 0.1,
        seed: 1,
    })
    .unwrap()
}

fn e2e_config(variant: AalVariant, ds: &Dataset) -> TrainConfig {
    let episode = EpisodeSpec { ways: 4, shots: 2, seed: 1 };
    let epochs = E2E_EPISODE_LIMIT / episode.episodes_per_epoch(ds);
    TrainConfig {
        epochs,
        episode,
        aal_variant: variant,
        ..TrainConfig::default()
    }
}

/// Seen-class accuracy on the training images, scored against seen prototypes only.
fn training_accuracy(ckpt: &Checkpoint, ds: &Dataset) -> f64 {
    let cp = model::encode_class_prototypes(ds.class_semantics(), &ckpt.params).unwrap();
    let seen: Vec<(usize, u32)> = ds
        .class_ids()
        .iter()
        .enumerate()
        .filter(|(_, id)| ds.seen_classes().contains(id))
        .map(|(r, &id)| (r, id))
        .collect();
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for &i in ds.train_indices() {
        let h = model::global_feature(&ds.feature_map(i)).to_vec();
        let best = seen
            .iter()
            .map(|&(r, id)| (common::cos(&h, &cp.row(r).to_vec()), id))
            .fold((f64::NEG_INFINITY, u32::MAX), |b, x| if x.0 > b.0 { x } else { b });
        preds.push(best.1);
        labels.push(ds.labels()[i]);
    }
    eval::per_class_accuracy(&preds, &labels, ds.seen_classes())
}

/// Mean attribute score over present and absent attributes of each test image's class.
fn attribute_score_gap(ckpt: &Checkpoint, ds: &Dataset) -> (f64, f64) {
    let (mut present, mut absent) = ((0.0, 0usize), (0.0, 0usize));
    for &i in ds.test_indices() {
        let out = model::forward(&ds.feature_map(i), &ckpt.params, ckpt.model.attention_softmax_axis).unwrap();
        let row = ds.class_semantics().row(ds.class_index(ds.labels()[i]).unwrap());
        for (j, &score) in out.a_hat.iter().enumerate() {
            let bucket = if row[j] > 0.5 { &mut present } else { &mut absent };
            bucket.0 += score;
            bucket.1 += 1;
        }
    }
    (present.0 / present.1 as f64, absent.0 / absent.1 as f64)
}

fn end_to_end(r: &mut Report, variant: AalVariant, ds: &Dataset) -> Checkpoint {
    let cfg = e2e_config(variant, ds);
    let start = Instant::now();
    let out = trainer::train(ds, &cfg).unwrap();
    let czsl = eval::evaluate(&out.checkpoint, ds, EvalMode::Czsl, eval::GAMMA_DEFAULT).unwrap();
    let gzsl = eval::evaluate(&out.checkpoint, ds, EvalMode::Gzsl, eval::GAMMA_DEFAULT).unwrap();
    let elapsed = start.elapsed();
    let (u, s, h) = (gzsl.u.unwrap(), gzsl.s.unwrap(), gzsl.h.unwrap());
    let train_acc = training_accuracy(&out.checkpoint, ds);
    let (present, absent) = attribute_score_gap(&out.checkpoint, ds);
    r.check(
        &format!("6 (end-to-end, {variant:?} alignment)"),
        czsl.acc_czsl >= E2E_MIN_CZSL && h > 0.0 && u > 0.0 && elapsed < E2E_BUDGET && out.trace.len() <= E2E_EPISODE_LIMIT
            && present > absent,
        format!(
            "{} episodes, CZSL {:.1} >= {E2E_MIN_CZSL}; GZSL gamma={} U {u:.1} S {s:.1} H {h:.1}; seen train acc {train_acc:.1}; attribute score present {present:.3} > absent {absent:.3}; {:.1}s < {}s",
            out.trace.len(),
            czsl.acc_czsl,
            eval::GAMMA_DEFAULT,
            elapsed.as_secs_f64(),
            E2E_BUDGET.as_secs()
        ),
    );
    out.checkpoint
}

fn sampler(r: &mut Report) {
    let ds = generate_synthetic(&SynthSpec {
        n_seen: 8,
        n_unseen: 2,
        num_attributes: 4,
        channels: 4,
        height: 2,
        width: 2,
        images_per_class: 10,
        noise_scale: 0.1,
        seed: 3,
    })
    .unwrap();
    let spec = EpisodeSpec { ways: 4, shots: 2, seed: 99 };
    let mut sampler = EpisodeSampler::new(&ds, spec).unwrap();
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    let mut well_formed = true;
    for _ in 0..SAMPLER_EPISODES {
        let batch = sampler.next_batch().unwrap();
        let mut per_class: BTreeMap<u32, usize> = BTreeMap::new();
        for &l in &batch.labels {
            *per_class.entry(l).or_default() += 1;
        }
        let mut images = batch.image_indices.clone();
        images.sort_unstable();
        images.dedup();
        well_formed &= per_class.len() == spec.ways
            && per_class.values().all(|&n| n == spec.shots)
            && per_class.keys().all(|c| ds.seen_classes().contains(c))
            && images.len() == spec.batch_size();
        for (c, _) in per_class {
            *counts.entry(c).or_default() += 1;
        }
    }
    let mean = (SAMPLER_EPISODES * spec.ways) as f64 / ds.seen_classes().len() as f64;
    let worst = counts.values().map(|&n| (n as f64 - mean).abs() / mean).fold(0.0, f64::max);
    r.check(
        "7 (episode sampler)",
        worst <= UNIFORMITY && well_formed && counts.len() == ds.seen_classes().len(),
        format!(
            "{SAMPLER_EPISODES} episodes, {}-way {}-shot over {} seen classes; max deviation from mean {:.2}% <= {}%; composition valid: {well_formed}",
            spec.ways,
            spec.shots,
            counts.len(),
            100.0 * worst,
            100.0 * UNIFORMITY
        ),
    );
}

fn main() -> ExitCode {
    let mut r = Report { failures: 0 };
    gradients(&mut r);
    mining_oracle(&mut r);
    metric_fidelity(&mut r);
    structural(&mut r);
    let ds = e2e_dataset();
    let ckpt = end_to_end(&mut r, AalVariant::Verbatim, &ds);
    end_to_end(&mut r, AalVariant::Flipped, &ds);
    calibrated_stacking(&mut r, &ckpt, &ds);
    sampler(&mut r);
    if r.failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria failed", r.failures);
        ExitCode::FAILURE
    }
}
