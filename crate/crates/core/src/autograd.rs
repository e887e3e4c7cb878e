//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation eagerly. Row vectors are `1 × n`
//! matrices and scalars are `1 × 1`. [`Tape::backward`] returns gradients for
//! every node that depends on a leaf created with [`Tape::param`].

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

/// Variance floor inside layer normalization.
pub const LN_EPS: f64 = 1e-9;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, xhat: Array2<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    L1 { pred: Var, target: Array2<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Array2<f64> },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]. Untracked nodes have none.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
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

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    /// `a + row`, with `row` (`1 × n`) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    /// `a ⊙ row`, with `row` (`1 × n`) broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu_scalar);
        self.push(v, Op::Gelu(a), &[a])
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row *= is;
            inv_std.push(is);
        }
        let out = xhat.clone();
        self.push(out, Op::LayerNorm { x, xhat, inv_std }, &[x])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a).view());
        self.push(v, Op::Softmax(a), &[a])
    }

    /// Columns `lo..hi`.
    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let v = self.value(a).slice(s![.., lo..hi]).to_owned();
        self.push(v, Op::SliceCols(a, lo, hi), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// `out[i] = a[idx[i]]`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), idx);
        self.push(v, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Column means as a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("mean_rows: empty")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a), &[a])
    }

    /// `Σ|pred - target| / rows`: per-row L1 norms averaged over rows.
    pub fn l1_loss(&mut self, pred: Var, target: Array2<f64>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim(), "l1_loss: shape mismatch");
        let total: f64 = p.iter().zip(target.iter()).map(|(a, b)| (a - b).abs()).sum();
        let v = Array2::from_elem((1, 1), total / p.nrows() as f64);
        self.push(v, Op::L1 { pred, target }, &[pred])
    }

    /// Mean softmax cross-entropy of `logits` rows against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.nrows(), labels.len(), "cross_entropy: label count");
        let probs = softmax_rows(l.view());
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -probs[[i, y]].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / labels.len() as f64;
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], tracked: bool, v: Var, g: Array2<f64>) {
            if !tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let t = |v: &Var| self.nodes[v.0].tracked;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if t(a) {
                        let ga = g.dot(&self.value(*b).t());
                        acc(&mut grads, true, *a, ga);
                    }
                    if t(b) {
                        let gb = self.value(*a).t().dot(&g);
                        acc(&mut grads, true, *b, gb);
                    }
                }
                Op::Transpose(a) => acc(&mut grads, t(a), *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, t(b), *b, g.clone());
                    acc(&mut grads, t(a), *a, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, t(b), *b, -&g);
                    acc(&mut grads, t(a), *a, g.clone());
                }
                Op::AddRow(a, row) => {
                    if t(row) {
                        acc(&mut grads, true, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(&mut grads, t(a), *a, g.clone());
                }
                Op::MulRow(a, row) => {
                    if t(row) {
                        let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, true, *row, gr);
                    }
                    if t(a) {
                        acc(&mut grads, true, *a, &g * self.value(*row));
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, t(a), *a, &g * *c),
                Op::Gelu(a) => {
                    let mut ga = self.value(*a).mapv(gelu_grad);
                    ga *= &g;
                    acc(&mut grads, t(a), *a, ga);
                }
                Op::LayerNorm { x, xhat, inv_std } => {
                    let n = xhat.ncols() as f64;
                    let mut gx = Array2::zeros(xhat.raw_dim());
                    for (r, mut out) in gx.rows_mut().into_iter().enumerate() {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mean_g = gr.sum() / n;
                        let mean_gx = gr.dot(&xr) / n;
                        for k in 0..out.len() {
                            out[k] = inv_std[r] * (gr[k] - mean_g - xr[k] * mean_gx);
                        }
                    }
                    acc(&mut grads, t(x), *x, gx);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Array2::zeros(y.raw_dim());
                    for (r, mut out) in ga.rows_mut().into_iter().enumerate() {
                        let dot = g.row(r).dot(&y.row(r));
                        for k in 0..out.len() {
                            out[k] = y[[r, k]] * (g[[r, k]] - dot);
                        }
                    }
                    acc(&mut grads, t(a), *a, ga);
                }
                Op::SliceCols(a, lo, hi) => {
                    if t(a) {
                        let mut ga = Array2::zeros(self.value(*a).raw_dim());
                        ga.slice_mut(s![.., *lo..*hi]).assign(&g);
                        acc(&mut grads, true, *a, ga);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if t(p) {
                            acc(&mut grads, true, *p, g.slice(s![.., off..off + w]).to_owned());
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        if t(p) {
                            acc(&mut grads, true, *p, g.slice(s![off..off + h, ..]).to_owned());
                        }
                        off += h;
                    }
                }
                Op::GatherRows(a, idx) => {
                    if t(a) {
                        let mut ga = Array2::zeros(self.value(*a).raw_dim());
                        for (i, &src) in idx.iter().enumerate() {
                            let mut dst = ga.row_mut(src);
                            dst += &g.row(i);
                        }
                        acc(&mut grads, true, *a, ga);
                    }
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.value(*a).dim();
                    let row = g.row(0).to_owned() / rows as f64;
                    let ga = Array2::from_shape_fn((rows, cols), |(_, c)| row[c]);
                    acc(&mut grads, t(a), *a, ga);
                }
                Op::L1 { pred, target } => {
                    let p = self.value(*pred);
                    let scale = g[[0, 0]] / p.nrows() as f64;
                    let mut ga = p - target;
                    ga.mapv_inplace(|d| if d > 0.0 { scale } else if d < 0.0 { -scale } else { 0.0 });
                    acc(&mut grads, t(pred), *pred, ga);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let mut ga = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        ga[[i, y]] -= 1.0;
                    }
                    ga *= g[[0, 0]] / labels.len() as f64;
                    acc(&mut grads, t(logits), *logits, ga);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}
