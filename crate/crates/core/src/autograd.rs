//! Tape-based reverse-mode automatic differentiation over 2-D arrays.
//!
//! The model, training losses, and CRF are all expressed as ops on a
//! [`Tape`]; one `backward` pass then yields gradients for every parameter
//! leaf. Ops are an explicit enum — each case carries its backward rule —
//! rather than closures, so the whole engine is auditable in one place.
//! Gradients accumulate in tape order, which keeps results bit-for-bit
//! reproducible run to run.
//!
//! Scalars are generic over [`Scalar`] (f32 for training, f64 for gradient
//! checks and exactness tests).

use ndarray::{Array2, Axis};

/// Float type the tape can differentiate through.
pub trait Scalar:
    num_traits::Float + ndarray::LinalgScalar + std::fmt::Debug + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F: Scalar> {
    /// Input with no parents. `slot` identifies a parameter for gradient
    /// collection; `None` marks a constant (no gradient tracked).
    Leaf { slot: Option<usize> },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// (m×n) plus a (1×n) row vector broadcast over rows.
    AddRowVec(Var, Var),
    Scale(Var, F),
    /// Elementwise product with a constant (dropout masks).
    MulConst(Var, Array2<F>),
    /// Elementwise sum with a constant (attention masks).
    AddConstMat(Var),
    Gelu(Var),
    Tanh(Var),
    /// Row-wise layer normalization with learned scale/shift.
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: F },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// out[i] = x[indices[i]]; repeated indices accumulate gradient.
    /// Doubles as embedding lookup.
    GatherRows { x: Var, indices: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, len: usize },
    /// Σ_i −logp[i, targets[i]], a 1×1 result.
    NllSum { logp: Var, targets: Vec<usize> },
    /// Linear-chain CRF log-partition (forward algorithm in log space);
    /// backward is the forward–backward marginal computation.
    CrfLogZ { emissions: Var, trans: Var, start: Var, end: Var },
    /// Score of a fixed tag path under the CRF.
    CrfScore { emissions: Var, trans: Var, start: Var, end: Var, tags: Vec<usize> },
}

struct Node<F: Scalar> {
    value: Array2<F>,
    op: Op<F>,
}

/// Gradients per parameter slot after a backward pass.
pub struct Gradients<F: Scalar> {
    by_slot: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn slot(&self, slot: usize) -> Option<&Array2<F>> {
        self.by_slot.get(slot).and_then(|g| g.as_ref())
    }

    pub fn take(mut self) -> Vec<Option<Array2<F>>> {
        std::mem::take(&mut self.by_slot)
    }
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn logsumexp<F: Scalar>(xs: impl Iterator<Item = F> + Clone) -> F {
    let max = xs.clone().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return max;
    }
    let sum = xs.fold(F::zero(), |acc, x| acc + (x - max).exp());
    max + sum.ln()
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

fn gelu_value<F: Scalar>(x: F) -> F {
    let c = F::from_f64(SQRT_2_OVER_PI);
    let k = F::from_f64(GELU_COEFF);
    let half = F::from_f64(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (F::one() + inner.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64(SQRT_2_OVER_PI);
    let k = F::from_f64(GELU_COEFF);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * k * x * x)
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> F {
        debug_assert_eq!(self.nodes[v.0].value.dim(), (1, 1));
        self.nodes[v.0].value[(0, 0)]
    }

    /// Parameter leaf; gradients are collected under `slot`.
    pub fn param(&mut self, value: Array2<F>, slot: usize) -> Var {
        self.push(value, Op::Leaf { slot: Some(slot) })
    }

    /// Constant leaf; no gradient tracked.
    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf { slot: None })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Var {
        debug_assert_eq!(self.nodes[v.0].value.nrows(), 1);
        let value = &self.nodes[a.0].value + &self.nodes[v.0].value;
        self.push(value, Op::AddRowVec(a, v))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn mul_const(&mut self, a: Var, mask: Array2<F>) -> Var {
        let value = &self.nodes[a.0].value * &mask;
        self.push(value, Op::MulConst(a, mask))
    }

    pub fn add_const(&mut self, a: Var, c: Array2<F>) -> Var {
        let value = &self.nodes[a.0].value + &c;
        self.push(value, Op::AddConstMat(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(gelu_value);
        self.push(value, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.tanh());
        self.push(value, Op::Tanh(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let xv = &self.nodes[x.0].value;
        let (rows, cols) = xv.dim();
        let mut out = Array2::zeros((rows, cols));
        for r in 0..rows {
            let row = xv.row(r);
            let (mean, rstd) = row_moments(&row, eps);
            for c in 0..cols {
                out[(r, c)] = (row[c] - mean) * rstd;
            }
        }
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        for r in 0..rows {
            for c in 0..cols {
                out[(r, c)] = out[(r, c)] * gv[(0, c)] + bv[(0, c)];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows_of(&self.nodes[a.0].value);
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let xv = &self.nodes[a.0].value;
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let lse = logsumexp(row.iter().copied());
            row.mapv_inplace(|x| x - lse);
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut out = Array2::zeros((indices.len(), xv.ncols()));
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).assign(&xv.row(i));
        }
        self.push(out, Op::GatherRows { x, indices })
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.nodes[parts[0].0].value.nrows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.ncols()).sum();
        let mut out = Array2::zeros((rows, total));
        let mut offset = 0;
        for p in &parts {
            let pv = &self.nodes[p.0].value;
            out.slice_mut(ndarray::s![.., offset..offset + pv.ncols()])
                .assign(pv);
            offset += pv.ncols();
        }
        self.push(out, Op::ConcatCols(parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[x.0]
            .value
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(value, Op::SliceCols { x, start, len })
    }

    pub fn nll_sum(&mut self, logp: Var, targets: Vec<usize>) -> Var {
        let lv = &self.nodes[logp.0].value;
        debug_assert_eq!(lv.nrows(), targets.len());
        let mut total = F::zero();
        for (r, &t) in targets.iter().enumerate() {
            total = total - lv[(r, t)];
        }
        let value = Array2::from_elem((1, 1), total);
        self.push(value, Op::NllSum { logp, targets })
    }

    /// Log-partition of a linear-chain CRF with `emissions` (L×T),
    /// `trans` (T×T), and `start`/`end` (1×T).
    pub fn crf_log_z(&mut self, emissions: Var, trans: Var, start: Var, end: Var) -> Var {
        let em = &self.nodes[emissions.0].value;
        let tr = &self.nodes[trans.0].value;
        let st = &self.nodes[start.0].value;
        let en = &self.nodes[end.0].value;
        let alpha = crf_forward(em, tr, st);
        let last = alpha.row(alpha.nrows() - 1);
        let log_z = logsumexp((0..em.ncols()).map(|j| last[j] + en[(0, j)]));
        let value = Array2::from_elem((1, 1), log_z);
        self.push(value, Op::CrfLogZ { emissions, trans, start, end })
    }

    /// Path score: start[t0] + Σ emissions[i][ti] + Σ trans[ti][ti+1] + end[tL].
    pub fn crf_score(
        &mut self,
        emissions: Var,
        trans: Var,
        start: Var,
        end: Var,
        tags: Vec<usize>,
    ) -> Var {
        let em = &self.nodes[emissions.0].value;
        let tr = &self.nodes[trans.0].value;
        let st = &self.nodes[start.0].value;
        let en = &self.nodes[end.0].value;
        debug_assert_eq!(em.nrows(), tags.len());
        let mut score = st[(0, tags[0])] + em[(0, tags[0])];
        for i in 1..tags.len() {
            score = score + tr[(tags[i - 1], tags[i])] + em[(i, tags[i])];
        }
        score = score + en[(0, tags[tags.len() - 1])];
        let value = Array2::from_elem((1, 1), score);
        self.push(value, Op::CrfScore { emissions, trans, start, end, tags })
    }

    /// Reverse pass from a 1×1 root. Returns accumulated gradients for every
    /// parameter slot in `0..n_slots`.
    pub fn backward(&self, root: Var, n_slots: usize) -> Gradients<F> {
        assert_eq!(
            self.nodes[root.0].value.dim(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), F::one()));
        let mut by_slot: Vec<Option<Array2<F>>> = (0..n_slots).map(|_| None).collect();

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf { slot } => {
                    if let Some(slot) = slot {
                        accumulate(&mut by_slot[*slot], &g);
                    }
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    accumulate(&mut grads[a.0], &g.dot(&bv.t()));
                    accumulate(&mut grads[b.0], &av.t().dot(&g));
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads[a.0], &g.t().to_owned());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::AddRowVec(a, v) => {
                    accumulate(&mut grads[a.0], &g);
                    let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[v.0], &col_sum);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads[a.0], &g.mapv(|x| x * *c));
                }
                Op::MulConst(a, mask) => {
                    accumulate(&mut grads[a.0], &(&g * mask));
                }
                Op::AddConstMat(a) => {
                    accumulate(&mut grads[a.0], &g);
                }
                Op::Gelu(a) => {
                    let da = self.nodes[a.0].value.mapv(gelu_grad);
                    accumulate(&mut grads[a.0], &(&g * &da));
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let da = y.mapv(|t| F::one() - t * t);
                    accumulate(&mut grads[a.0], &(&g * &da));
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (dx, dgamma, dbeta) = layer_norm_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[gamma.0].value,
                        *eps,
                        &g,
                    );
                    accumulate(&mut grads[x.0], &dx);
                    accumulate(&mut grads[gamma.0], &dgamma);
                    accumulate(&mut grads[beta.0], &dbeta);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[idx].value;
                    let mut dx = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot = (0..y.ncols())
                            .map(|c| g[(r, c)] * y[(r, c)])
                            .fold(F::zero(), |acc, v| acc + v);
                        for c in 0..y.ncols() {
                            dx[(r, c)] = y[(r, c)] * (g[(r, c)] - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], &dx);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &self.nodes[idx].value;
                    let mut dx = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let gsum = (0..y.ncols())
                            .map(|c| g[(r, c)])
                            .fold(F::zero(), |acc, v| acc + v);
                        for c in 0..y.ncols() {
                            dx[(r, c)] = g[(r, c)] - y[(r, c)].exp() * gsum;
                        }
                    }
                    accumulate(&mut grads[a.0], &dx);
                }
                Op::GatherRows { x, indices } => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = Array2::zeros(xv.dim());
                    for (r, &i) in indices.iter().enumerate() {
                        dx.row_mut(i)
                            .zip_mut_with(&g.row(r), |a, &b| *a = *a + b);
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        let part = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads[p.0], &part);
                        offset += w;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = Array2::zeros(xv.dim());
                    dx.slice_mut(ndarray::s![.., *start..start + len]).assign(&g);
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::NllSum { logp, targets } => {
                    let gs = g[(0, 0)];
                    let lv = &self.nodes[logp.0].value;
                    let mut dl = Array2::zeros(lv.dim());
                    for (r, &t) in targets.iter().enumerate() {
                        dl[(r, t)] = dl[(r, t)] - gs;
                    }
                    accumulate(&mut grads[logp.0], &dl);
                }
                Op::CrfLogZ { emissions, trans, start, end } => {
                    let gs = g[(0, 0)];
                    let (dem, dtr, dst, den) = crf_log_z_backward(
                        &self.nodes[emissions.0].value,
                        &self.nodes[trans.0].value,
                        &self.nodes[start.0].value,
                        &self.nodes[end.0].value,
                        self.nodes[idx].value[(0, 0)],
                        gs,
                    );
                    accumulate(&mut grads[emissions.0], &dem);
                    accumulate(&mut grads[trans.0], &dtr);
                    accumulate(&mut grads[start.0], &dst);
                    accumulate(&mut grads[end.0], &den);
                }
                Op::CrfScore { emissions, trans, start, end, tags } => {
                    let gs = g[(0, 0)];
                    let em = &self.nodes[emissions.0].value;
                    let tr = &self.nodes[trans.0].value;
                    let mut dem = Array2::zeros(em.dim());
                    let mut dtr = Array2::zeros(tr.dim());
                    let mut dst = Array2::zeros((1, em.ncols()));
                    let mut den = Array2::zeros((1, em.ncols()));
                    dst[(0, tags[0])] = gs;
                    den[(0, tags[tags.len() - 1])] = gs;
                    for (i, &t) in tags.iter().enumerate() {
                        dem[(i, t)] = dem[(i, t)] + gs;
                        if i + 1 < tags.len() {
                            dtr[(t, tags[i + 1])] = dtr[(t, tags[i + 1])] + gs;
                        }
                    }
                    accumulate(&mut grads[emissions.0], &dem);
                    accumulate(&mut grads[trans.0], &dtr);
                    accumulate(&mut grads[start.0], &dst);
                    accumulate(&mut grads[end.0], &den);
                }
            }
        }
        Gradients { by_slot }
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Array2<F>>, delta: &Array2<F>) {
    match slot {
        Some(existing) => existing.zip_mut_with(delta, |a, &b| *a = *a + b),
        None => *slot = Some(delta.clone()),
    }
}

fn row_moments<F: Scalar>(row: &ndarray::ArrayView1<'_, F>, eps: F) -> (F, F) {
    let n = F::from_f64(row.len() as f64);
    let mean = row.iter().fold(F::zero(), |a, &x| a + x) / n;
    let var = row
        .iter()
        .fold(F::zero(), |a, &x| a + (x - mean) * (x - mean))
        / n;
    (mean, (var + eps).sqrt().recip())
}

pub fn softmax_rows_of<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.iter().fold(F::zero(), |a, &v| a + v);
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn layer_norm_backward<F: Scalar>(
    x: &Array2<F>,
    gamma: &Array2<F>,
    eps: F,
    g: &Array2<F>,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let (rows, cols) = x.dim();
    let n = F::from_f64(cols as f64);
    let mut dx = Array2::zeros((rows, cols));
    let mut dgamma = Array2::zeros((1, cols));
    let mut dbeta = Array2::zeros((1, cols));
    for r in 0..rows {
        let row = x.row(r);
        let (mean, rstd) = row_moments(&row, eps);
        // xhat, gy = g*gamma, and their row means.
        let mut gy_mean = F::zero();
        let mut gyx_mean = F::zero();
        for c in 0..cols {
            let xhat = (row[c] - mean) * rstd;
            let gy = g[(r, c)] * gamma[(0, c)];
            gy_mean = gy_mean + gy;
            gyx_mean = gyx_mean + gy * xhat;
            dgamma[(0, c)] = dgamma[(0, c)] + g[(r, c)] * xhat;
            dbeta[(0, c)] = dbeta[(0, c)] + g[(r, c)];
        }
        gy_mean = gy_mean / n;
        gyx_mean = gyx_mean / n;
        for c in 0..cols {
            let xhat = (row[c] - mean) * rstd;
            let gy = g[(r, c)] * gamma[(0, c)];
            dx[(r, c)] = (gy - gy_mean - xhat * gyx_mean) * rstd;
        }
    }
    (dx, dgamma, dbeta)
}

/// Forward (alpha) recursion in log space. Returns the full L×T table.
fn crf_forward<F: Scalar>(em: &Array2<F>, tr: &Array2<F>, st: &Array2<F>) -> Array2<F> {
    let (len, n_tags) = em.dim();
    let mut alpha = Array2::zeros((len, n_tags));
    for j in 0..n_tags {
        alpha[(0, j)] = st[(0, j)] + em[(0, j)];
    }
    for t in 1..len {
        for j in 0..n_tags {
            let lse = logsumexp((0..n_tags).map(|i| alpha[(t - 1, i)] + tr[(i, j)]));
            alpha[(t, j)] = lse + em[(t, j)];
        }
    }
    alpha
}

/// Backward (beta) recursion in log space.
fn crf_backward_table<F: Scalar>(em: &Array2<F>, tr: &Array2<F>, en: &Array2<F>) -> Array2<F> {
    let (len, n_tags) = em.dim();
    let mut beta = Array2::zeros((len, n_tags));
    for i in 0..n_tags {
        beta[(len - 1, i)] = en[(0, i)];
    }
    for t in (0..len - 1).rev() {
        for i in 0..n_tags {
            beta[(t, i)] = logsumexp(
                (0..n_tags).map(|j| tr[(i, j)] + em[(t + 1, j)] + beta[(t + 1, j)]),
            );
        }
    }
    beta
}

/// Gradient of logZ: node marginals for emissions/start/end, edge marginals
/// for transitions.
fn crf_log_z_backward<F: Scalar>(
    em: &Array2<F>,
    tr: &Array2<F>,
    st: &Array2<F>,
    en: &Array2<F>,
    log_z: F,
    g: F,
) -> (Array2<F>, Array2<F>, Array2<F>, Array2<F>) {
    let (len, n_tags) = em.dim();
    let alpha = crf_forward(em, tr, st);
    let beta = crf_backward_table(em, tr, en);

    let mut dem = Array2::zeros((len, n_tags));
    for t in 0..len {
        for j in 0..n_tags {
            dem[(t, j)] = g * (alpha[(t, j)] + beta[(t, j)] - log_z).exp();
        }
    }
    let mut dtr = Array2::zeros((n_tags, n_tags));
    for t in 0..len.saturating_sub(1) {
        for i in 0..n_tags {
            for j in 0..n_tags {
                let xi = alpha[(t, i)] + tr[(i, j)] + em[(t + 1, j)] + beta[(t + 1, j)] - log_z;
                dtr[(i, j)] = dtr[(i, j)] + g * xi.exp();
            }
        }
    }
    let mut dst = Array2::zeros((1, n_tags));
    let mut den = Array2::zeros((1, n_tags));
    for j in 0..n_tags {
        dst[(0, j)] = dem[(0, j)];
        den[(0, j)] = g * (alpha[(len - 1, j)] + en[(0, j)] - log_z).exp();
    }
    (dem, dtr, dst, den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Finite-difference check: builds the graph twice per probed
    /// coordinate and compares central differences against the tape.
    fn fd_check<B>(build: B, inputs: &[Array2<f64>], tol: f64)
    where
        B: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(slot, a)| tape.param(a.clone(), slot))
            .collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out, inputs.len());

        let eps = 1e-6;
        for (slot, input) in inputs.iter().enumerate() {
            for ((r, c), _) in input.indexed_iter() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(s, a)| {
                            let mut a = a.clone();
                            if s == slot {
                                a[(r, c)] += delta;
                            }
                            t.param(a, s)
                        })
                        .collect();
                    let o = build(&mut t, &vs);
                    t.scalar(o)
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let analytic = grads
                    .slot(slot)
                    .map(|grad| grad[(r, c)])
                    .unwrap_or(0.0);
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (analytic - numeric).abs() / denom < tol,
                    "slot {slot} ({r},{c}): analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    fn sum_all(t: &mut Tape<f64>, v: Var) -> Var {
        // Reduce to a scalar through matmuls with ones.
        let (rows, cols) = t.value(v).dim();
        let left = t.constant(Array2::from_elem((1, rows), 1.0));
        let right = t.constant(Array2::from_elem((cols, 1), 1.0));
        let rowed = t.matmul(left, v);
        t.matmul(rowed, right)
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let a = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let b = array![[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]];
        let mut tape: Tape<f64> = Tape::new();
        let va = tape.constant(a.clone());
        let vb = tape.constant(b.clone());
        let vc = tape.matmul(va, vb);
        let expected = graft_oracles::naive_matmul(
            a.as_slice().unwrap(),
            b.as_slice().unwrap(),
            2,
            3,
            2,
        );
        for (i, e) in expected.iter().enumerate() {
            let (r, c) = (i / 2, i % 2);
            assert!((tape.value(vc)[(r, c)] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_gradients() {
        let a = array![[0.3, -1.2], [0.7, 0.1]];
        let b = array![[1.1, 0.4], [-0.6, 0.9]];
        fd_check(
            |t, vs| {
                let m = t.matmul(vs[0], vs[1]);
                sum_all(t, m)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn elementwise_op_gradients() {
        let x = array![[0.5, -0.8, 1.3], [-0.2, 0.9, -1.7]];
        fd_check(
            |t, vs| {
                let g = t.gelu(vs[0]);
                let h = t.tanh(g);
                let s = t.scale(h, 1.7);
                sum_all(t, s)
            },
            &[x],
            1e-5,
        );
    }

    #[test]
    fn add_row_vec_gradients() {
        let x = array![[0.5, -0.8], [-0.2, 0.9], [1.0, 2.0]];
        let b = array![[0.1, -0.3]];
        fd_check(
            |t, vs| {
                let s = t.add_row_vec(vs[0], vs[1]);
                let g = t.gelu(s);
                sum_all(t, g)
            },
            &[x, b],
            1e-5,
        );
    }

    #[test]
    fn layer_norm_gradients() {
        let x = array![[0.5, -0.8, 1.3, 0.0], [-0.2, 0.9, -1.7, 2.2]];
        let gamma = array![[1.1, 0.9, 1.0, 1.2]];
        let beta = array![[0.0, 0.1, -0.1, 0.2]];
        fd_check(
            |t, vs| {
                let ln = t.layer_norm(vs[0], vs[1], vs[2], 1e-12);
                let g = t.gelu(ln);
                sum_all(t, g)
            },
            &[x, gamma, beta],
            1e-4,
        );
    }

    #[test]
    fn softmax_and_log_softmax_gradients() {
        let x = array![[0.5, -0.8, 1.3], [-0.2, 0.9, -1.7]];
        fd_check(
            |t, vs| {
                let s = t.softmax_rows(vs[0]);
                let g = t.gelu(s);
                sum_all(t, g)
            },
            &[x.clone()],
            1e-5,
        );
        fd_check(
            |t, vs| {
                let l = t.log_softmax_rows(vs[0]);
                t.nll_sum(l, vec![2, 0])
            },
            &[x],
            1e-5,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = array![[3.0, 1.0, 0.2], [-5.0, 0.0, 5.0]];
        let mut tape: Tape<f64> = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax_rows(v);
        for row in tape.value(s).rows() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_rows_accumulates_repeated_indices() {
        let table = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        fd_check(
            |t, vs| {
                let g = t.gather_rows(vs[0], vec![1, 1, 2, 0]);
                let act = t.gelu(g);
                sum_all(t, act)
            },
            &[table],
            1e-5,
        );
    }

    #[test]
    fn concat_slice_transpose_gradients() {
        let x = array![[0.5, -0.8, 1.3, 0.4], [-0.2, 0.9, -1.7, 0.6]];
        fd_check(
            |t, vs| {
                let a = t.slice_cols(vs[0], 0, 2);
                let b = t.slice_cols(vs[0], 2, 2);
                let bt = t.transpose(b);
                let m = t.matmul(a, bt);
                let cat = t.concat_cols(vec![m, a]);
                let g = t.gelu(cat);
                sum_all(t, g)
            },
            &[x],
            1e-5,
        );
    }

    #[test]
    fn mul_and_add_const_gradients() {
        let x = array![[0.5, -0.8], [-0.2, 0.9]];
        let mask = array![[2.0, 0.0], [0.0, 1.25]];
        let bias = array![[0.3, -0.4], [0.1, 0.0]];
        fd_check(
            |t, vs| {
                let m = t.mul_const(vs[0], mask.clone());
                let a = t.add_const(m, bias.clone());
                let g = t.gelu(a);
                sum_all(t, g)
            },
            &[x],
            1e-5,
        );
    }

    #[test]
    fn crf_log_z_matches_enumeration() {
        let em = array![[0.3, -0.5, 0.8], [1.1, 0.0, -0.7], [-0.2, 0.4, 0.6]];
        let tr = array![[0.1, -0.2, 0.3], [0.0, 0.5, -0.4], [0.2, 0.1, 0.0]];
        let st = array![[0.05, -0.1, 0.2]];
        let en = array![[-0.3, 0.2, 0.1]];
        let mut tape: Tape<f64> = Tape::new();
        let (e, t_, s, n) = (
            tape.constant(em.clone()),
            tape.constant(tr.clone()),
            tape.constant(st.clone()),
            tape.constant(en.clone()),
        );
        let z = tape.crf_log_z(e, t_, s, n);
        let reference = graft_oracles::enumerate_crf(
            &em.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
            &tr.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
            st.as_slice().unwrap(),
            en.as_slice().unwrap(),
        );
        assert!((tape.scalar(z) - reference.log_z).abs() < 1e-10);
    }

    #[test]
    fn crf_gradients() {
        let em = array![[0.3, -0.5], [1.1, 0.0], [-0.2, 0.4]];
        let tr = array![[0.1, -0.2], [0.0, 0.5]];
        let st = array![[0.05, -0.1]];
        let en = array![[-0.3, 0.2]];
        // Negative log-likelihood of a fixed path: logZ - score.
        fd_check(
            |t, vs| {
                let z = t.crf_log_z(vs[0], vs[1], vs[2], vs[3]);
                let sc = t.crf_score(vs[0], vs[1], vs[2], vs[3], vec![0, 1, 0]);
                let neg = t.scale(sc, -1.0);
                t.add(z, neg)
            },
            &[em, tr, st, en],
            1e-6,
        );
    }

    #[test]
    fn gradient_accumulates_across_multiple_uses() {
        // f(x) = sum(x·xᵀ): the same leaf feeds both matmul operands.
        let x = array![[0.5, -0.8], [-0.2, 0.9]];
        fd_check(
            |t, vs| {
                let xt = t.transpose(vs[0]);
                let m = t.matmul(vs[0], xt);
                sum_all(t, m)
            },
            &[x],
            1e-6,
        );
    }
}
