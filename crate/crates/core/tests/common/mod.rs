//! Brute-force reference implementations and a finite-difference checker.
//!
//! Everything here is written from the loss definitions directly: plain
//! loops, no log-sum-exp, no sorting, no shared code with the library beyond
//! the tape used to evaluate the function under test.

#![allow(dead_code, clippy::needless_range_loop)]

pub mod gradients;

use hdafl::autodiff::{Tape, Var};
use hdafl::losses::AalVariant;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt().max(1e-12) * nb.sqrt().max(1e-12))
}

fn row(m: &Array2<f64>, i: usize) -> Vec<f64> {
    m.row(i).to_vec()
}

/// Mean over rows of `−log softmax_y(α·cos(h_i, cp_·))`.
pub fn classification(h: &Array2<f64>, cp: &Array2<f64>, labels: &[usize], alpha: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..h.nrows() {
        let mut denom = 0.0;
        for j in 0..cp.nrows() {
            denom += (alpha * cos(&row(h, i), &row(cp, j))).exp();
        }
        let num = (alpha * cos(&row(h, i), &row(cp, labels[i]))).exp();
        total += -(num / denom).ln();
    }
    total / h.nrows() as f64
}

pub fn squared_error(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s
}

/// Sum over pool entries of the alignment term.
pub fn alignment(feats: &Array2<f64>, ids: &[usize], ap: &Array2<f64>, variant: AalVariant, margin: f64) -> f64 {
    let mut total = 0.0;
    for r in 0..feats.nrows() {
        let own = cos(&row(feats, r), &row(ap, ids[r]));
        let mut min = f64::INFINITY;
        for j in 0..ap.nrows() {
            if j != ids[r] {
                min = min.min(cos(&row(feats, r), &row(ap, j)));
            }
        }
        let t = match variant {
            AalVariant::Verbatim => own - 0.5 * min,
            AalVariant::Flipped => 0.5 * min - own + margin,
        };
        total += t.max(0.0);
    }
    total
}

/// Keep-mask after dropping `⌊fraction·n⌋` easiest candidates, computed by
/// counting how many candidates outrank each one (ties: lower index first).
pub fn mining_keep(sims: &[f64], fraction: f64, drop_most_similar: bool) -> Vec<bool> {
    let n = sims.len();
    let drop = ((fraction * n as f64).floor() as usize).min(n.saturating_sub(1));
    (0..n)
        .map(|i| {
            let ahead = (0..n)
                .filter(|&j| {
                    let easier = if drop_most_similar { sims[j] > sims[i] } else { sims[j] < sims[i] };
                    easier || (sims[j] == sims[i] && j < i)
                })
                .count();
            ahead >= drop
        })
        .collect()
}

/// Hard-mined attribute contrastive loss, enumerating pairs directly.
pub fn attribute_contrastive(
    feats: &Array2<f64>,
    attrs: &[usize],
    images: &[usize],
    mu: f64,
    eps: f64,
    tau: f64,
) -> f64 {
    let n = attrs.len();
    let mut sum = 0.0;
    let mut anchors = 0;
    for r in 0..n {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for s in 0..n {
            if attrs[s] == attrs[r] && images[s] != images[r] {
                pos.push(s);
            } else if attrs[s] != attrs[r] {
                neg.push(s);
            }
        }
        if pos.is_empty() {
            continue;
        }
        let pos_sims: Vec<f64> = pos.iter().map(|&s| cos(&row(feats, r), &row(feats, s))).collect();
        let neg_sims: Vec<f64> = neg.iter().map(|&s| cos(&row(feats, r), &row(feats, s))).collect();
        let keep_pos = mining_keep(&pos_sims, mu, true);
        let keep_neg = mining_keep(&neg_sims, eps, false);
        let mut denom = 0.0;
        for (k, &sim) in pos_sims.iter().enumerate() {
            if keep_pos[k] {
                denom += (sim / tau).exp();
            }
        }
        for (k, &sim) in neg_sims.iter().enumerate() {
            if keep_neg[k] {
                denom += (sim / tau).exp();
            }
        }
        let mut p = 0.0;
        let mut u = 0;
        for (k, &sim) in pos_sims.iter().enumerate() {
            if keep_pos[k] {
                p -= ((sim / tau).exp() / denom).ln();
                u += 1;
            }
        }
        sum += p / u as f64;
        anchors += 1;
    }
    if anchors == 0 {
        0.0
    } else {
        sum / anchors as f64
    }
}

/// Plain supervised contrastive loss: for each anchor with positives,
/// `−mean_p log(exp(s_ip/τ) / Σ_{a≠i} exp(s_ia/τ))`. Returns the sum over
/// anchors and the number of anchors that contributed.
pub fn supcon(feats: &Array2<f64>, groups: &[usize], tau: f64) -> (f64, usize) {
    let n = groups.len();
    let mut sum = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && groups[p] == groups[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let mut denom = 0.0;
        for a in 0..n {
            if a != i {
                denom += (cos(&row(feats, i), &row(feats, a)) / tau).exp();
            }
        }
        let mut term = 0.0;
        for &p in &positives {
            term -= ((cos(&row(feats, i), &row(feats, p)) / tau).exp() / denom).ln();
        }
        sum += term / positives.len() as f64;
        anchors += 1;
    }
    (sum, anchors)
}

/// Class contrastive loss: SupCon summed over anchors, divided by B.
pub fn class_contrastive(h: &Array2<f64>, labels: &[usize], tau: f64) -> f64 {
    if labels.len() < 2 {
        return 0.0;
    }
    supcon(h, labels, tau).0 / labels.len() as f64
}

/// Random pool of `n` entries with distinct (image, attribute) pairs.
pub fn random_pool(rng: &mut ChaCha8Rng, n: usize, c: usize, k: usize, images: usize) -> (Array2<f64>, Vec<usize>, Vec<usize>) {
    let mut pairs = Vec::new();
    while pairs.len() < n {
        let p = (rng.random_range(0..images), rng.random_range(0..k));
        if !pairs.contains(&p) {
            pairs.push(p);
        }
    }
    let feats = randn(rng, n, c);
    let images = pairs.iter().map(|p| p.0).collect();
    let attrs = pairs.iter().map(|p| p.1).collect();
    (feats, attrs, images)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both norms are negligible.
pub fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Largest per-tensor relative error between the tape gradient and central
/// differences of the scalar built by `f` from `inputs`.
pub fn gradient_error(inputs: &[Array2<f64>], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Array2<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.scalar(out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);

    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, inputs[t].dim());
        let mut numeric = Array2::zeros(inputs[t].dim());
        for idx in 0..inputs[t].len() {
            let pos = (idx / inputs[t].ncols(), idx % inputs[t].ncols());
            let orig = xs[t][pos];
            xs[t][pos] = orig + FD_STEP;
            let up = eval(&xs);
            xs[t][pos] = orig - FD_STEP;
            let down = eval(&xs);
            xs[t][pos] = orig;
            numeric[pos] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}
