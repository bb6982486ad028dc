//! The attribute-attention head.
//!
//! Per image the head maps a feature map `f` (H×W×C, flattened to HW×C
//! row-major over positions) to:
//!
//! * `att`: per-attribute attention over positions (HW×K),
//! * `af`: attention-pooled attribute features, `attᵀ·f` (K×C),
//! * `eaf`: `af` after the channel-attention discrimination encoder (K×C),
//! * `h_x`: global average pooled feature (C),
//! * `a_hat`: per-attribute max response of `att` (K).
//!
//! Class and attribute prototypes come from two independent MLP encoders.
//! Every computation is expressed on an [`autodiff::Tape`](crate::autodiff::Tape)
//! so training and inference share one code path.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Axis over which the raw attention logits are normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxAxis {
    /// Each attribute map is a distribution over the H·W positions.
    #[default]
    Spatial,
    /// Each position is a distribution over the K attributes.
    Attributes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// K
    pub num_attributes: usize,
    /// C
    pub channels: usize,
    pub class_semantic_dim: usize,
    pub attribute_semantic_dim: usize,
    pub hidden_width: usize,
    pub heads: usize,
    /// Feed-forward inner width is `ff_multiplier · C`.
    pub ff_multiplier: usize,
    pub attention_softmax_axis: SoftmaxAxis,
}

impl ModelConfig {
    pub const DEFAULT_HIDDEN_WIDTH: usize = 1024;
    pub const DEFAULT_HEADS: usize = 8;
    pub const DEFAULT_FF_MULTIPLIER: usize = 4;

    pub fn new(
        num_attributes: usize,
        channels: usize,
        class_semantic_dim: usize,
        attribute_semantic_dim: usize,
    ) -> Self {
        Self {
            num_attributes,
            channels,
            class_semantic_dim,
            attribute_semantic_dim,
            hidden_width: Self::DEFAULT_HIDDEN_WIDTH,
            heads: Self::DEFAULT_HEADS,
            ff_multiplier: Self::DEFAULT_FF_MULTIPLIER,
            attention_softmax_axis: SoftmaxAxis::Spatial,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_attributes", self.num_attributes),
            ("channels", self.channels),
            ("class_semantic_dim", self.class_semantic_dim),
            ("attribute_semantic_dim", self.attribute_semantic_dim),
            ("hidden_width", self.hidden_width),
            ("heads", self.heads),
            ("ff_multiplier", self.ff_multiplier),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide channels ({})",
                self.heads, self.channels
            )));
        }
        Ok(())
    }
}

/// Affine layer `x·W + b`; `weight` is in×out, `bias` is 1×out.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = Array2<f64>> {
    pub weight: T,
    pub bias: T,
}

/// Rectified MLP; no activation after the last layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T = Array2<f64>> {
    pub layers: Vec<Linear<T>>,
}

/// Channel-attention encoder weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AdeParams<T = Array2<f64>> {
    pub heads: usize,
    /// Per head, (C/h)×(C/h).
    pub w_q: Vec<T>,
    pub w_k: Vec<T>,
    pub w_v: Vec<T>,
    /// C×C output projection applied to the concatenated heads.
    pub w_o: T,
    pub ff_in: Linear<T>,
    pub ff_out: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T = Array2<f64>> {
    /// K×C, one 1×1×C kernel per attribute.
    pub attr_kernels: T,
    pub class_encoder: Mlp<T>,
    pub attr_encoder: Mlp<T>,
    pub ade: AdeParams<T>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

impl Linear {
    pub fn init(rng: &mut ChaCha8Rng, input: usize, output: usize) -> Self {
        Self {
            weight: uniform(rng, input, output, input),
            bias: uniform(rng, 1, output, input),
        }
    }
}

impl Mlp {
    pub fn init(rng: &mut ChaCha8Rng, widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Linear::init(rng, w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.nrows())
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.ncols())
    }
}

impl AdeParams {
    pub fn init(rng: &mut ChaCha8Rng, channels: usize, heads: usize, ff_width: usize) -> Self {
        let d = channels / heads;
        let block = |rng: &mut ChaCha8Rng| (0..heads).map(|_| uniform(rng, d, d, d)).collect();
        let w_q = block(rng);
        let w_k = block(rng);
        let w_v = block(rng);
        Self {
            heads,
            w_q,
            w_k,
            w_v,
            w_o: uniform(rng, channels, channels, channels),
            ff_in: Linear::init(rng, channels, ff_width),
            ff_out: Linear::init(rng, ff_width, channels),
        }
    }

    /// Zeroes `W^o` and the feed-forward output layer, turning the encoder
    /// into the identity map.
    pub fn zero_residual_branches(&mut self) {
        self.w_o.fill(0.0);
        self.ff_out.weight.fill(0.0);
        self.ff_out.bias.fill(0.0);
    }
}

impl HeadParams {
    /// Uniform `±1/√fan_in` initialization from a seeded generator.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, c, hid) = (config.num_attributes, config.channels, config.hidden_width);
        let attr_kernels = uniform(&mut rng, k, c, c);
        let class_encoder = Mlp::init(&mut rng, &[config.class_semantic_dim, hid, hid, c]);
        let attr_encoder = Mlp::init(&mut rng, &[config.attribute_semantic_dim, hid, hid, c]);
        let ade = AdeParams::init(&mut rng, c, config.heads, config.ff_multiplier * c);
        Ok(Self {
            attr_kernels,
            class_encoder,
            attr_encoder,
            ade,
        })
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.len());
        n
    }

    /// Checks that every tensor is finite and that shapes agree with `config`.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let mut bad = None;
        self.for_each(&mut |name, t| {
            if bad.is_none() && t.iter().any(|v| !v.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(Error::Numeric(format!("parameter `{name}` is not finite")));
        }
        let (k, c) = (config.num_attributes, config.channels);
        if self.attr_kernels.dim() != (k, c) {
            return Err(Error::Shape(format!(
                "attr_kernels is {:?}, expected ({k}, {c})",
                self.attr_kernels.dim()
            )));
        }
        for (name, mlp, input) in [
            ("class_encoder", &self.class_encoder, config.class_semantic_dim),
            ("attr_encoder", &self.attr_encoder, config.attribute_semantic_dim),
        ] {
            if mlp.input_width() != input || mlp.output_width() != c {
                return Err(Error::Shape(format!(
                    "{name} maps {}→{}, expected {input}→{c}",
                    mlp.input_width(),
                    mlp.output_width()
                )));
            }
        }
        if self.ade.heads != config.heads || self.ade.w_o.dim() != (c, c) {
            return Err(Error::Shape("ade parameters do not match config".into()));
        }
        Ok(())
    }
}

impl<T> HeadParams<T> {
    /// Visits every tensor with a stable dotted name, in a fixed order.
    pub fn for_each<'a>(&'a self, f: &mut dyn FnMut(&str, &'a T)) {
        f("attr_kernels", &self.attr_kernels);
        for (prefix, mlp) in [("class_encoder", &self.class_encoder), ("attr_encoder", &self.attr_encoder)] {
            for (i, l) in mlp.layers.iter().enumerate() {
                f(&format!("{prefix}.{i}.weight"), &l.weight);
                f(&format!("{prefix}.{i}.bias"), &l.bias);
            }
        }
        for (prefix, ws) in [("ade.w_q", &self.ade.w_q), ("ade.w_k", &self.ade.w_k), ("ade.w_v", &self.ade.w_v)] {
            for (i, w) in ws.iter().enumerate() {
                f(&format!("{prefix}.{i}"), w);
            }
        }
        f("ade.w_o", &self.ade.w_o);
        f("ade.ff_in.weight", &self.ade.ff_in.weight);
        f("ade.ff_in.bias", &self.ade.ff_in.bias);
        f("ade.ff_out.weight", &self.ade.ff_out.weight);
        f("ade.ff_out.bias", &self.ade.ff_out.bias);
    }

    /// Same traversal order as [`HeadParams::for_each`].
    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        f("attr_kernels", &mut self.attr_kernels);
        for (prefix, mlp) in [("class_encoder", &mut self.class_encoder), ("attr_encoder", &mut self.attr_encoder)] {
            for (i, l) in mlp.layers.iter_mut().enumerate() {
                f(&format!("{prefix}.{i}.weight"), &mut l.weight);
                f(&format!("{prefix}.{i}.bias"), &mut l.bias);
            }
        }
        for (prefix, ws) in [
            ("ade.w_q", &mut self.ade.w_q),
            ("ade.w_k", &mut self.ade.w_k),
            ("ade.w_v", &mut self.ade.w_v),
        ] {
            for (i, w) in ws.iter_mut().enumerate() {
                f(&format!("{prefix}.{i}"), w);
            }
        }
        f("ade.w_o", &mut self.ade.w_o);
        f("ade.ff_in.weight", &mut self.ade.ff_in.weight);
        f("ade.ff_in.bias", &mut self.ade.ff_in.bias);
        f("ade.ff_out.weight", &mut self.ade.ff_out.weight);
        f("ade.ff_out.bias", &mut self.ade.ff_out.bias);
    }

    /// Structure-preserving map.
    pub fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> HeadParams<U> {
        let map_mlp = |prefix: &str, mlp: &Mlp<T>, f: &mut dyn FnMut(&str, &T) -> U| Mlp {
            layers: mlp
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| Linear {
                    weight: f(&format!("{prefix}.{i}.weight"), &l.weight),
                    bias: f(&format!("{prefix}.{i}.bias"), &l.bias),
                })
                .collect(),
        };
        let attr_kernels = f("attr_kernels", &self.attr_kernels);
        let class_encoder = map_mlp("class_encoder", &self.class_encoder, f);
        let attr_encoder = map_mlp("attr_encoder", &self.attr_encoder, f);
        let mut block = |prefix: &str, ws: &[T]| -> Vec<U> {
            ws.iter()
                .enumerate()
                .map(|(i, w)| f(&format!("{prefix}.{i}"), w))
                .collect()
        };
        let w_q = block("ade.w_q", &self.ade.w_q);
        let w_k = block("ade.w_k", &self.ade.w_k);
        let w_v = block("ade.w_v", &self.ade.w_v);
        let w_o = f("ade.w_o", &self.ade.w_o);
        let ff_in = Linear {
            weight: f("ade.ff_in.weight", &self.ade.ff_in.weight),
            bias: f("ade.ff_in.bias", &self.ade.ff_in.bias),
        };
        let ff_out = Linear {
            weight: f("ade.ff_out.weight", &self.ade.ff_out.weight),
            bias: f("ade.ff_out.bias", &self.ade.ff_out.bias),
        };
        HeadParams {
            attr_kernels,
            class_encoder,
            attr_encoder,
            ade: AdeParams {
                heads: self.ade.heads,
                w_q,
                w_k,
                w_v,
                w_o,
                ff_in,
                ff_out,
            },
        }
    }
}

impl HeadParams {
    /// Places every tensor on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> HeadParams<Var> {
        self.map(&mut |_, t| tape.param(t.clone()))
    }

    /// Places every tensor on `tape` as a constant (inference).
    pub fn bind_constant(&self, tape: &mut Tape) -> HeadParams<Var> {
        self.map(&mut |_, t| tape.constant(t.clone()))
    }
}

/// Per-image head output.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOut {
    /// H×W×K
    pub att: Array3<f64>,
    /// K×C
    pub af: Array2<f64>,
    /// K×C
    pub eaf: Array2<f64>,
    /// C
    pub h_x: Array1<f64>,
    /// K
    pub a_hat: Array1<f64>,
}

/// Tape handles for one image's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// HW×K
    pub att: Var,
    pub af: Var,
    pub eaf: Var,
    /// 1×C
    pub h_x: Var,
    /// 1×K
    pub a_hat: Var,
}

pub fn attention_maps_on(tape: &mut Tape, f: Var, kernels: Var, axis: SoftmaxAxis) -> Var {
    let kt = tape.transpose(kernels);
    let logits = tape.matmul(f, kt);
    match axis {
        SoftmaxAxis::Spatial => tape.softmax_cols(logits),
        SoftmaxAxis::Attributes => tape.softmax_rows(logits),
    }
}

pub fn attribute_features_on(tape: &mut Tape, f: Var, att: Var) -> Var {
    let at = tape.transpose(att);
    tape.matmul(at, f)
}

pub fn global_feature_on(tape: &mut Tape, f: Var) -> Var {
    tape.mean_rows(f)
}

pub fn attribute_scores_on(tape: &mut Tape, att: Var) -> Var {
    tape.max_rows(att)
}

/// Row-wise MLP over an n×D input.
pub fn encode_on(tape: &mut Tape, x: Var, mlp: &Mlp<Var>) -> Var {
    let mut h = x;
    let last = mlp.layers.len().saturating_sub(1);
    for (i, layer) in mlp.layers.iter().enumerate() {
        let z = tape.matmul(h, layer.weight);
        h = tape.add_row(z, layer.bias);
        if i < last {
            h = tape.relu(h);
        }
    }
    h
}

/// Output of the discrimination encoder plus the per-head channel attention.
#[derive(Clone, Debug)]
pub struct AdeTrace {
    pub eaf: Var,
    /// Per head, a (C/h)×(C/h) row-stochastic matrix.
    pub attention: Vec<Var>,
}

/// Channel-attention encoder over a K×C attribute feature matrix.
pub fn ade_on(tape: &mut Tape, af: Var, ade: &AdeParams<Var>) -> AdeTrace {
    let (k, c) = tape.shape(af);
    let d = c / ade.heads;
    let scale = 1.0 / (k as f64).sqrt();
    let mut heads_t = Vec::with_capacity(ade.heads);
    let mut attention = Vec::with_capacity(ade.heads);
    for i in 0..ade.heads {
        let block = tape.slice_cols(af, i * d, (i + 1) * d);
        let q = tape.matmul(block, ade.w_q[i]);
        let key = tape.matmul(block, ade.w_k[i]);
        let v = tape.matmul(block, ade.w_v[i]);
        let qt = tape.transpose(q);
        let logits = tape.matmul(qt, key);
        let logits = tape.scale(logits, scale);
        let weights = tape.softmax_rows(logits);
        // head = weights · Vᵀ is (C/h)×K; keep its transpose, K×(C/h).
        let vt = tape.transpose(v);
        let head = tape.matmul(weights, vt);
        heads_t.push(tape.transpose(head));
        attention.push(weights);
    }
    let cat = tape.concat_cols(&heads_t);
    let mh = tape.matmul(cat, ade.w_o);
    let af_hat = tape.add(af, mh);
    let z = tape.matmul(af_hat, ade.ff_in.weight);
    let z = tape.add_row(z, ade.ff_in.bias);
    let z = tape.relu(z);
    let z = tape.matmul(z, ade.ff_out.weight);
    let ff = tape.add_row(z, ade.ff_out.bias);
    let eaf = tape.add(af_hat, ff);
    AdeTrace { eaf, attention }
}

/// Full per-image head on a HW×C feature node.
pub fn forward_on(tape: &mut Tape, f: Var, params: &HeadParams<Var>, axis: SoftmaxAxis) -> ForwardVars {
    let att = attention_maps_on(tape, f, params.attr_kernels, axis);
    let af = attribute_features_on(tape, f, att);
    let h_x = global_feature_on(tape, f);
    let a_hat = attribute_scores_on(tape, att);
    let eaf = ade_on(tape, af, &params.ade).eaf;
    ForwardVars {
        att,
        af,
        eaf,
        h_x,
        a_hat,
    }
}

fn ensure_finite<'a>(what: &str, mut values: impl Iterator<Item = &'a f64>) -> Result<()> {
    if values.any(|v| !v.is_finite()) {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    } else {
        Ok(())
    }
}

/// Flattens an H×W×C map to HW×C, positions in row-major (p, q) order.
pub fn flatten_feature_map(f: &Array3<f64>) -> Array2<f64> {
    let (h, w, c) = f.dim();
    f.as_standard_layout()
        .into_owned()
        .into_shape_with_order((h * w, c))
        .expect("standard layout reshape")
}

pub fn attention_maps(f: &Array3<f64>, kernels: &Array2<f64>, axis: SoftmaxAxis) -> Result<Array3<f64>> {
    let (h, w, c) = f.dim();
    if kernels.ncols() != c {
        return Err(Error::Shape(format!(
            "kernels have {} channels, feature map has {c}",
            kernels.ncols()
        )));
    }
    ensure_finite("feature map", f.iter())?;
    ensure_finite("attribute kernels", kernels.iter())?;
    let mut tape = Tape::new();
    let fv = tape.constant(flatten_feature_map(f));
    let kv = tape.constant(kernels.clone());
    let att = attention_maps_on(&mut tape, fv, kv, axis);
    Ok(tape
        .value(att)
        .clone()
        .into_shape_with_order((h, w, kernels.nrows()))
        .expect("reshape attention"))
}

pub fn attribute_features(f: &Array3<f64>, att: &Array3<f64>) -> Result<Array2<f64>> {
    let (h, w, _) = f.dim();
    let (ah, aw, _) = att.dim();
    if (h, w) != (ah, aw) {
        return Err(Error::Shape(format!(
            "attention is {ah}×{aw}, feature map is {h}×{w}"
        )));
    }
    let mut tape = Tape::new();
    let fv = tape.constant(flatten_feature_map(f));
    let av = tape.constant(flatten_feature_map(att));
    let af = attribute_features_on(&mut tape, fv, av);
    Ok(tape.value(af).clone())
}

pub fn global_feature(f: &Array3<f64>) -> Array1<f64> {
    let (h, w, c) = f.dim();
    f.to_shape((h * w, c))
        .expect("reshape")
        .mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(c))
}

pub fn attribute_scores(att: &Array3<f64>) -> Array1<f64> {
    let k = att.dim().2;
    let mut out = Array1::from_elem(k, f64::NEG_INFINITY);
    for lane in att.rows() {
        for (j, &v) in lane.iter().enumerate() {
            if v > out[j] {
                out[j] = v;
            }
        }
    }
    out
}

fn encode(semantics: &Array2<f64>, mlp: &Mlp) -> Result<Array2<f64>> {
    if semantics.ncols() != mlp.input_width() {
        return Err(Error::Shape(format!(
            "semantic vectors have width {}, encoder expects {}",
            semantics.ncols(),
            mlp.input_width()
        )));
    }
    ensure_finite("semantic matrix", semantics.iter())?;
    let mut tape = Tape::new();
    let x = tape.constant(semantics.clone());
    let bound = Mlp {
        layers: mlp
            .layers
            .iter()
            .map(|l| Linear {
                weight: tape.constant(l.weight.clone()),
                bias: tape.constant(l.bias.clone()),
            })
            .collect(),
    };
    let out = encode_on(&mut tape, x, &bound);
    Ok(tape.value(out).clone())
}

/// Class prototypes, one row per class semantic vector.
pub fn encode_class_prototypes(class_semantics: &Array2<f64>, params: &HeadParams) -> Result<Array2<f64>> {
    encode(class_semantics, &params.class_encoder)
}

/// Attribute prototypes, one row per attribute semantic vector.
pub fn encode_attribute_prototypes(attribute_semantics: &Array2<f64>, params: &HeadParams) -> Result<Array2<f64>> {
    encode(attribute_semantics, &params.attr_encoder)
}

/// Applies an MLP directly; exposed for encoders built outside [`HeadParams`].
pub fn apply_mlp(input: &Array2<f64>, mlp: &Mlp) -> Result<Array2<f64>> {
    encode(input, mlp)
}

fn bind_ade(tape: &mut Tape, ade: &AdeParams) -> AdeParams<Var> {
    let mut c = |t: &Array2<f64>| tape.constant(t.clone());
    AdeParams {
        heads: ade.heads,
        w_q: ade.w_q.iter().map(&mut c).collect(),
        w_k: ade.w_k.iter().map(&mut c).collect(),
        w_v: ade.w_v.iter().map(&mut c).collect(),
        w_o: c(&ade.w_o),
        ff_in: Linear {
            weight: c(&ade.ff_in.weight),
            bias: c(&ade.ff_in.bias),
        },
        ff_out: Linear {
            weight: c(&ade.ff_out.weight),
            bias: c(&ade.ff_out.bias),
        },
    }
}

fn check_ade(af: &Array2<f64>, ade: &AdeParams) -> Result<()> {
    let c = af.ncols();
    if ade.heads == 0 || !c.is_multiple_of(ade.heads) {
        return Err(Error::Config(format!(
            "heads ({}) must divide channels ({c})",
            ade.heads
        )));
    }
    if ade.w_o.dim() != (c, c) || ade.w_q.len() != ade.heads {
        return Err(Error::Shape("encoder weights do not match feature width".into()));
    }
    ensure_finite("attribute features", af.iter())
}

/// Channel-attention discrimination encoder: K×C → K×C.
pub fn attribute_discrimination_encode(af: &Array2<f64>, ade: &AdeParams) -> Result<Array2<f64>> {
    check_ade(af, ade)?;
    let mut tape = Tape::new();
    let x = tape.constant(af.clone());
    let bound = bind_ade(&mut tape, ade);
    let trace = ade_on(&mut tape, x, &bound);
    let eaf = tape.value(trace.eaf).clone();
    ensure_finite("enhanced attribute features", eaf.iter())?;
    Ok(eaf)
}

/// Per-head channel-attention matrices produced while encoding `af`.
pub fn channel_attention(af: &Array2<f64>, ade: &AdeParams) -> Result<Vec<Array2<f64>>> {
    check_ade(af, ade)?;
    let mut tape = Tape::new();
    let x = tape.constant(af.clone());
    let bound = bind_ade(&mut tape, ade);
    let trace = ade_on(&mut tape, x, &bound);
    Ok(trace.attention.iter().map(|&v| tape.value(v).clone()).collect())
}

/// Evaluates the head on one H×W×C feature map.
pub fn forward(f: &Array3<f64>, params: &HeadParams, axis: SoftmaxAxis) -> Result<ForwardOut> {
    let (h, w, c) = f.dim();
    if params.attr_kernels.ncols() != c {
        return Err(Error::Shape(format!(
            "feature map has {c} channels, model expects {}",
            params.attr_kernels.ncols()
        )));
    }
    ensure_finite("feature map", f.iter())?;
    let mut tape = Tape::new();
    let fv = tape.constant(flatten_feature_map(f));
    let bound = params.bind_constant(&mut tape);
    let out = forward_on(&mut tape, fv, &bound, axis);
    let k = params.attr_kernels.nrows();
    let row = |v: Var| tape.value(v).row(0).to_owned();
    let result = ForwardOut {
        att: tape
            .value(out.att)
            .clone()
            .into_shape_with_order((h, w, k))
            .expect("reshape attention"),
        af: tape.value(out.af).clone(),
        eaf: tape.value(out.eaf).clone(),
        h_x: row(out.h_x),
        a_hat: row(out.a_hat),
    };
    ensure_finite("head output", result.eaf.iter())?;
    Ok(result)
}
