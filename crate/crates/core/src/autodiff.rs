//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation in evaluation order. Calling
//! [`Tape::backward`] on a `1×1` node walks the tape in reverse and
//! accumulates adjoints for every node that depends on a trainable leaf.
//! Shape mismatches between operands are programming errors and panic.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

/// Norm floor used by [`Tape::normalize_rows`] and every cosine in the crate.
pub const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    NormalizeRows(Var, Vec<f64>),
    /// Scalar-valued head with a precomputed local gradient.
    Scalar(Var, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` was on a differentiable path.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but yields zeros shaped like the node when absent.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

pub(crate) fn softmax_rows(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: excluded from gradient computation.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul {:?} x {:?}",
            va.dim(),
            vb.dim()
        );
        let out = va.dot(vb);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// `a + b` with `b` a `1×n` row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(vb.nrows(), 1, "add_row expects a 1xN bias");
        assert_eq!(va.ncols(), vb.ncols(), "add_row width mismatch");
        let out = va + vb;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddRow(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a).view());
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a).t()).reversed_axes();
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxCols(a), rg)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let out = self.value(a).select(Axis(0), rows);
        let rg = self.rg(a);
        self.push(out, Op::SelectRows(a, rows.to_vec()), rg)
    }

    /// Column means as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = va
            .mean_axis(Axis(0))
            .expect("mean_rows of empty matrix")
            .insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(out, Op::MeanRows(a), rg)
    }

    /// Column maxima as a `1×n` row; ties resolve to the first row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut arg = vec![0usize; va.ncols()];
        let mut out = Array2::zeros((1, va.ncols()));
        for (j, col) in va.columns().into_iter().enumerate() {
            let mut best = 0;
            for (i, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = i;
                }
            }
            arg[j] = best;
            out[[0, j]] = col[best];
        }
        let rg = self.rg(a);
        self.push(out, Op::MaxRows(a, arg), rg)
    }

    /// Divides each row by `max(‖row‖₂, NORM_FLOOR)`.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        let mut norms = Vec::with_capacity(va.nrows());
        let mut floored = false;
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            let d = if n > NORM_FLOOR {
                n
            } else {
                floored = true;
                NORM_FLOOR
            };
            row.mapv_inplace(|v| v / d);
            norms.push(n);
        }
        if floored {
            log::warn!("zero-norm vector in cosine normalization; denominator floored at {NORM_FLOOR:e}");
        }
        let rg = self.rg(a);
        self.push(out, Op::NormalizeRows(a, norms), rg)
    }

    /// Records a scalar function of `input` whose value and gradient were
    /// computed by the caller.
    pub fn scalar_fn(&mut self, input: Var, value: f64, grad: Array2<f64>) -> Var {
        assert_eq!(grad.dim(), self.shape(input), "scalar_fn gradient shape");
        let rg = self.rg(input);
        self.push(Array2::from_elem((1, 1), value), Op::Scalar(input, grad), rg)
    }

    /// Weighted sum of `1×1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let scaled = self.scale(v, w);
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled),
            });
        }
        acc.unwrap_or_else(|| self.constant(Array2::zeros((1, 1))))
    }

    /// Reverse sweep from a `1×1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut acc = |v: Var, delta: Array2<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                acc(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = y * g;
                for (mut drow, (yrow, grow)) in d
                    .rows_mut()
                    .into_iter()
                    .zip(y.rows().into_iter().zip(g.rows()))
                {
                    let dotp = yrow.dot(&grow);
                    drow.zip_mut_with(&yrow, |dv, &yv| *dv -= yv * dotp);
                }
                acc(*a, d);
            }
            Op::SoftmaxCols(a) => {
                let y = &node.value;
                let mut d = y * g;
                for j in 0..y.ncols() {
                    let dotp = y.column(j).dot(&g.column(j));
                    let ycol = y.column(j);
                    d.column_mut(j)
                        .zip_mut_with(&ycol, |dv, &yv| *dv -= yv * dotp);
                }
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    acc(p, g.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    acc(p, g.slice(s![off..off + h, ..]).to_owned());
                    off += h;
                }
            }
            Op::SelectRows(a, rows) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(i);
                }
                acc(*a, d);
            }
            Op::MeanRows(a) => {
                let (n, m) = self.shape(*a);
                let row = g.row(0).mapv(|v| v / n as f64);
                let d = row.broadcast((n, m)).expect("broadcast").to_owned();
                acc(*a, d);
            }
            Op::MaxRows(a, arg) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (j, &i) in arg.iter().enumerate() {
                    d[[i, j]] += g[[0, j]];
                }
                acc(*a, d);
            }
            Op::NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut d = g.clone();
                for (i, &n) in norms.iter().enumerate() {
                    let mut drow = d.row_mut(i);
                    if n > NORM_FLOOR {
                        let yrow = y.row(i);
                        let dotp = yrow.dot(&g.row(i));
                        drow.zip_mut_with(&yrow, |dv, &yv| *dv = (*dv - yv * dotp) / n);
                    } else {
                        drow.mapv_inplace(|v| v / NORM_FLOOR);
                    }
                }
                acc(*a, d);
            }
            Op::Scalar(a, local) => acc(*a, local * g[[0, 0]]),
        }
    }
}
