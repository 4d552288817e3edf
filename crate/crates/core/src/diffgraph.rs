//! Reverse-mode differentiation over real matrices.
//!
//! Every node holds an `(rows, cols)` array; rows are batch samples in all
//! of the crate's graphs. Complex vectors are stored in *split* layout: a
//! row of length `2n` holds `n` real parts followed by `n` imaginary parts.
//! Complex matrices (one complex vector per antenna) concatenate one split
//! block per antenna.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards
//! visits them in reverse topological order exactly once.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{invalid, Result};

/// Denominator guard for `|z|`, `||x||` and normalization.
pub const NORM_GUARD: f64 = 1e-12;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Infer,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    LinearMap(Var, Arc<Array2<f64>>),
    ComplexMul(Var, Var),
    ComplexAbs(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Recip(Var),
    Log(Var),
    Log2(Var),
    Exp(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    SumRows(Var),
    SumAll(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Reshape(Var),
    RepeatRows(Var, usize),
    L2Norm(Var),
    Normalize(Var),
    Softmax(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
        mode: BatchNormMode,
        batch_stats: Option<(Array1<f64>, Array1<f64>)>,
    },
    Autocorr2d {
        x: Var,
        antennas: usize,
        taps: usize,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// A single-use computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node after [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Array2<f64> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Array2::zeros(self.shapes[v.0]))
    }
}

fn shape(a: &Array2<f64>) -> (usize, usize) {
    a.dim()
}

/// Broadcast-compatible shape of two operands (each dim equal or one of
/// them 1).
fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

/// Sums a broadcast gradient back down to `target`.
fn reduce_to(g: Array2<f64>, target: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if target.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if target.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn broadcast_op(
    a: &Array2<f64>,
    b: &Array2<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> Option<Array2<f64>> {
    let out_shape = broadcast_shape(shape(a), shape(b))?;
    let av = a.broadcast(out_shape)?;
    let bv = b.broadcast(out_shape)?;
    Some(Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y)))
}

// Forward kernels shared with the plain (tape-free) feature functions so
// that both paths produce bit-identical values.

pub(crate) fn linear_map_forward(x: ArrayView2<f64>, m: &Array2<f64>) -> Array2<f64> {
    x.dot(m)
}

pub(crate) fn complex_abs_forward(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.ncols() / 2;
    let (re, im) = (x.slice(s![.., ..n]), x.slice(s![.., n..]));
    Zip::from(&re).and(&im).map_collect(|&a, &b| a.hypot(b))
}

pub(crate) fn normalize_forward(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt().max(NORM_GUARD);
        row.mapv_inplace(|v| v / norm);
    }
    out
}

pub(crate) fn autocorr_forward(x: ArrayView2<f64>, antennas: usize, taps: usize) -> Array2<f64> {
    let lags_b = 2 * antennas - 1;
    let lags_t = 2 * taps - 1;
    let n = lags_b * lags_t;
    let mut out = Array2::zeros((x.nrows(), 2 * n));
    for (row, mut o) in x.rows().into_iter().zip(out.rows_mut()) {
        let row = row.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| row.to_vec());
        let at = |b: usize, t: usize| (row[b * 2 * taps + t], row[b * 2 * taps + taps + t]);
        let mut acc_re = vec![0.0; n];
        let mut acc_im = vec![0.0; n];
        for b1 in 0..antennas {
            for t1 in 0..taps {
                let (ar, ai) = at(b1, t1);
                for b2 in 0..antennas {
                    let iu = b1 + antennas - 1 - b2;
                    for t2 in 0..taps {
                        let (br, bi) = at(b2, t2);
                        let k = iu * lags_t + (t1 + taps - 1 - t2);
                        // a * conj(b)
                        acc_re[k] += ar * br + ai * bi;
                        acc_im[k] += ai * br - ar * bi;
                    }
                }
            }
        }
        for k in 0..n {
            o[k] = acc_re[k];
            o[n + k] = acc_im[k];
        }
    }
    out
}

fn autocorr_backward(
    x: ArrayView2<f64>,
    g: ArrayView2<f64>,
    antennas: usize,
    taps: usize,
) -> Array2<f64> {
    let lags_t = 2 * taps - 1;
    let n = (2 * antennas - 1) * lags_t;
    let mut out = Array2::zeros(x.dim());
    for ((row, grow), mut orow) in x.rows().into_iter().zip(g.rows()).zip(out.rows_mut()) {
        let at = |b: usize, t: usize| (row[b * 2 * taps + t], row[b * 2 * taps + taps + t]);
        let mut adj = vec![(0.0, 0.0); antennas * taps];
        for b1 in 0..antennas {
            for t1 in 0..taps {
                let (ar, ai) = at(b1, t1);
                for b2 in 0..antennas {
                    let iu = b1 + antennas - 1 - b2;
                    for t2 in 0..taps {
                        let k = iu * lags_t + (t1 + taps - 1 - t2);
                        let (gr, gi) = (grow[k], grow[n + k]);
                        if gr == 0.0 && gi == 0.0 {
                            continue;
                        }
                        let (br, bi) = at(b2, t2);
                        // d/da: G * b ; d/db: conj(G) * a
                        let e = &mut adj[b1 * taps + t1];
                        e.0 += gr * br - gi * bi;
                        e.1 += gr * bi + gi * br;
                        let e = &mut adj[b2 * taps + t2];
                        e.0 += gr * ar + gi * ai;
                        e.1 += gr * ai - gi * ar;
                    }
                }
            }
        }
        for b in 0..antennas {
            for t in 0..taps {
                let (re, im) = adj[b * taps + t];
                orow[b * 2 * taps + t] = re;
                orow[b * 2 * taps + taps + t] = im;
            }
        }
    }
    out
}

fn check_even(cols: usize, what: &str) -> Result<()> {
    if cols % 2 != 0 {
        return invalid(format!("{what}: split complex layout needs an even width"));
    }
    Ok(())
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

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, value: Array2<f64>, op: Op) -> Var {
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, value: Array2<f64>, op: Op) -> Var {
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(value, op, ng)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Batch mean and biased variance recorded by a train-mode batch norm.
    pub fn batch_stats(&self, v: Var) -> Option<(&Array1<f64>, &Array1<f64>)> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                batch_stats: Some((m, var)),
                ..
            } => Some((m, var)),
            _ => None,
        }
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = match broadcast_op(self.value(a), self.value(b), f) {
            Some(v) => v,
            None => {
                return invalid(format!(
                    "{name}: shapes {:?} and {:?} do not broadcast",
                    self.shape(a),
                    self.shape(b)
                ))
            }
        };
        Ok(self.binary(a, b, value, op))
    }

    /// Elementwise sum; either operand may broadcast along a unit dimension.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x) * c;
        Ok(self.unary(x, v, Op::Scale(x, c)))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x) + c;
        Ok(self.unary(x, v, Op::AddScalar(x)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return invalid(format!("matmul: {sa:?} x {sb:?}"));
        }
        let v = self.value(a).dot(self.value(b));
        Ok(self.binary(a, b, v, Op::MatMul(a, b)))
    }

    /// `x * m` for a fixed matrix `m` (`in x out`); the adjoint is `g * m^T`.
    pub fn linear_map(&mut self, x: Var, m: Arc<Array2<f64>>) -> Result<Var> {
        if self.shape(x).1 != m.nrows() {
            return invalid(format!(
                "linear_map: input width {} vs map {:?}",
                self.shape(x).1,
                m.dim()
            ));
        }
        let v = linear_map_forward(self.value(x).view(), &m);
        Ok(self.unary(x, v, Op::LinearMap(x, m)))
    }

    /// Elementwise complex product of two split-layout tensors.
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return invalid(format!("complex_mul: {sa:?} vs {sb:?}"));
        }
        check_even(sa.1, "complex_mul")?;
        let n = sa.1 / 2;
        let (va, vb) = (self.value(a), self.value(b));
        let (ar, ai) = (va.slice(s![.., ..n]), va.slice(s![.., n..]));
        let (br, bi) = (vb.slice(s![.., ..n]), vb.slice(s![.., n..]));
        let mut out = Array2::zeros(sa);
        let re = Zip::from(&ar)
            .and(&ai)
            .and(&br)
            .and(&bi)
            .map_collect(|&ar, &ai, &br, &bi| ar * br - ai * bi);
        let im = Zip::from(&ar)
            .and(&ai)
            .and(&br)
            .and(&bi)
            .map_collect(|&ar, &ai, &br, &bi| ar * bi + ai * br);
        out.slice_mut(s![.., ..n]).assign(&re);
        out.slice_mut(s![.., n..]).assign(&im);
        Ok(self.binary(a, b, out, Op::ComplexMul(a, b)))
    }

    /// Moduli of a split-layout complex tensor; halves the width.
    pub fn complex_abs(&mut self, x: Var) -> Result<Var> {
        check_even(self.shape(x).1, "complex_abs")?;
        let v = complex_abs_forward(self.value(x).view());
        Ok(self.unary(x, v, Op::ComplexAbs(x)))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x).mapv(f);
        self.unary(x, v, op)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        Ok(self.map(x, f64::abs, Op::Abs(x)))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        Ok(self.map(x, |v| v * v, Op::Square(x)))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        Ok(self.map(x, f64::sqrt, Op::Sqrt(x)))
    }

    pub fn reciprocal(&mut self, x: Var) -> Result<Var> {
        Ok(self.map(x, f64::recip, Op::Recip(x)))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        Ok(self.map(x, f64::ln, Op::Log(x)))
    }

    pub fn log2(&mut self, x: Var) -> Result<Var> {
        Ok(self.map(x, f64::log2, Op::Log2(x)))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        Ok(self.map(x, f64::exp, Op::Exp(x)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        Ok(self.map(x, |v| v.max(0.0), Op::Relu(x)))
    }

    /// Clamp into `[lo, hi]`; zero gradient outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return invalid("clamp: lo > hi");
        }
        Ok(self.map(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi)))
    }

    /// Per-row sum, `(r, c) -> (r, 1)`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        Ok(self.unary(x, v, Op::SumRows(x)))
    }

    /// Sum of all entries, `(r, c) -> (1, 1)`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Array2::from_elem((1, 1), self.value(x).sum());
        Ok(self.unary(x, v, Op::SumAll(x)))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return invalid("concat: no inputs");
        }
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return invalid("concat: row counts differ");
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| crate::Error::InvalidArgument(format!("concat: {e}")))?;
        let ng = parts.iter().any(|&p| self.nodes[p.0].needs_grad);
        Ok(self.push(v, Op::Concat(parts.to_vec()), ng))
    }

    /// Columns `start..end`.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        if start >= end || end > self.shape(x).1 {
            return invalid(format!(
                "slice: {start}..{end} out of {}",
                self.shape(x).1
            ));
        }
        let v = self.value(x).slice(s![.., start..end]).to_owned();
        Ok(self.unary(x, v, Op::Slice(x, start)))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r * c != rows * cols {
            return invalid(format!("reshape: {r}x{c} into {rows}x{cols}"));
        }
        let v = self
            .value(x)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, cols))
            .expect("sizes checked");
        Ok(self.unary(x, v, Op::Reshape(x)))
    }

    /// Repeats every row `k` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, k: usize) -> Result<Var> {
        if k == 0 {
            return invalid("repeat_rows: k = 0");
        }
        let (r, c) = self.shape(x);
        let src = self.value(x);
        let mut v = Array2::zeros((r * k, c));
        for (i, row) in src.rows().into_iter().enumerate() {
            for j in 0..k {
                v.row_mut(i * k + j).assign(&row);
            }
        }
        Ok(self.unary(x, v, Op::RepeatRows(x, k)))
    }

    /// Per-row Euclidean norm, `(r, c) -> (r, 1)`.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let v = self
            .value(x)
            .map_axis(Axis(1), |row| row.dot(&row).sqrt())
            .insert_axis(Axis(1));
        Ok(self.unary(x, v, Op::L2Norm(x)))
    }

    /// Row-wise `x / max(||x||, NORM_GUARD)`.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let v = normalize_forward(self.value(x).view());
        Ok(self.unary(x, v, Op::Normalize(x)))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut v = self.value(x).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let total = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        Ok(self.unary(x, v, Op::Softmax(x)))
    }

    /// Batch normalization over rows. `gamma` and `beta` are `(1, c)`.
    /// In train mode batch statistics are used (and recorded); in infer mode
    /// `running` supplies `(mean, var)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode,
        running: Option<(&Array1<f64>, &Array1<f64>)>,
        eps: f64,
    ) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return invalid("batch_norm: gamma/beta must be 1 x cols");
        }
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                if r < 2 {
                    return invalid("batch_norm: train mode needs at least two rows");
                }
                let xv = self.value(x);
                let mean = xv.mean_axis(Axis(0)).expect("rows > 0");
                let var = xv.var_axis(Axis(0), 0.0);
                (mean.clone(), var.clone(), Some((mean, var)))
            }
            BatchNormMode::Infer => match running {
                Some((m, v)) if m.len() == c && v.len() == c => (m.clone(), v.clone(), None),
                _ => return invalid("batch_norm: infer mode needs running stats of width cols"),
            },
        };
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = (self.value(x) - &mean.view().insert_axis(Axis(0)))
            * &inv_std.view().insert_axis(Axis(0));
        let out = &xhat * self.value(gamma) + self.value(beta);
        let ng = [x, gamma, beta].iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
                batch_stats: stats,
            },
            ng,
        ))
    }

    /// Full 2-D self cross-correlation of a `B x T` complex matrix stored as
    /// `B` split blocks per row. Output lags `u in -(B-1)..B`,
    /// `v in -(T-1)..T`, flattened row-major over `(u, v)`, real parts then
    /// imaginary parts: width `2 (2B-1)(2T-1)`.
    pub fn autocorr2d(&mut self, x: Var, antennas: usize, taps: usize) -> Result<Var> {
        if antennas == 0 || taps == 0 || self.shape(x).1 != 2 * antennas * taps {
            return invalid(format!(
                "autocorr2d: width {} does not match {antennas}x{taps} complex",
                self.shape(x).1
            ));
        }
        let v = autocorr_forward(self.value(x).view(), antennas, taps);
        Ok(self.unary(x, v, Op::Autocorr2d { x, antennas, taps }))
    }

    /// Reverse pass from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return invalid(format!(
                "backward needs a scalar root, got {:?}",
                self.shape(root)
            ));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));

        let acc = |grads: &mut Vec<Option<Array2<f64>>>, v: Var, g: Array2<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        };

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let y = &node.value;
            let val = |v: Var| &self.nodes[v.0].value;
            let need = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if need(*a) {
                        acc(&mut grads, *a, reduce_to(g.clone(), val(*a).dim()));
                    }
                    if need(*b) {
                        acc(&mut grads, *b, reduce_to(g.clone(), val(*b).dim()));
                    }
                }
                Op::Sub(a, b) => {
                    if need(*a) {
                        acc(&mut grads, *a, reduce_to(g.clone(), val(*a).dim()));
                    }
                    if need(*b) {
                        acc(&mut grads, *b, reduce_to(-&g, val(*b).dim()));
                    }
                }
                Op::Mul(a, b) => {
                    if need(*a) {
                        let ga = broadcast_op(&g, val(*b), |g, y| g * y).expect("fwd shapes");
                        acc(&mut grads, *a, reduce_to(ga, val(*a).dim()));
                    }
                    if need(*b) {
                        let gb = broadcast_op(&g, val(*a), |g, x| g * x).expect("fwd shapes");
                        acc(&mut grads, *b, reduce_to(gb, val(*b).dim()));
                    }
                }
                Op::Scale(x, c) => acc(&mut grads, *x, g * *c),
                Op::AddScalar(x) => acc(&mut grads, *x, g),
                Op::MatMul(a, b) => {
                    if need(*a) {
                        acc(&mut grads, *a, g.dot(&val(*b).t()));
                    }
                    if need(*b) {
                        acc(&mut grads, *b, val(*a).t().dot(&g));
                    }
                }
                Op::LinearMap(x, m) => acc(&mut grads, *x, g.dot(&m.t())),
                Op::ComplexMul(a, b) => {
                    let cols = g.ncols() / 2;
                    // grad wrt a = G * conj(b), wrt b = G * conj(a)
                    let conj_times = |other: &Array2<f64>| {
                        let (gr, gi) = (g.slice(s![.., ..cols]), g.slice(s![.., cols..]));
                        let (or, oi) = (other.slice(s![.., ..cols]), other.slice(s![.., cols..]));
                        let mut out = Array2::zeros(g.dim());
                        out.slice_mut(s![.., ..cols]).assign(
                            &Zip::from(&gr)
                                .and(&gi)
                                .and(&or)
                                .and(&oi)
                                .map_collect(|&gr, &gi, &or, &oi| gr * or + gi * oi),
                        );
                        out.slice_mut(s![.., cols..]).assign(
                            &Zip::from(&gr)
                                .and(&gi)
                                .and(&or)
                                .and(&oi)
                                .map_collect(|&gr, &gi, &or, &oi| gi * or - gr * oi),
                        );
                        out
                    };
                    if need(*a) {
                        acc(&mut grads, *a, conj_times(val(*b)));
                    }
                    if need(*b) {
                        acc(&mut grads, *b, conj_times(val(*a)));
                    }
                }
                Op::ComplexAbs(x) => {
                    let xv = val(*x);
                    let cols = y.ncols();
                    let mut out = Array2::zeros(xv.dim());
                    for r in 0..y.nrows() {
                        for k in 0..cols {
                            let d = y[[r, k]].max(NORM_GUARD);
                            out[[r, k]] = g[[r, k]] * xv[[r, k]] / d;
                            out[[r, cols + k]] = g[[r, k]] * xv[[r, cols + k]] / d;
                        }
                    }
                    acc(&mut grads, *x, out);
                }
                Op::Abs(x) => {
                    let gx = Zip::from(&g).and(val(*x)).map_collect(|&g, &x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::Square(x) => {
                    acc(&mut grads, *x, Zip::from(&g).and(val(*x)).map_collect(|&g, &x| 2.0 * g * x))
                }
                Op::Sqrt(x) => acc(&mut grads, *x, Zip::from(&g).and(y).map_collect(|&g, &y| g * 0.5 / y)),
                Op::Recip(x) => {
                    acc(&mut grads, *x, Zip::from(&g).and(y).map_collect(|&g, &y| -g * y * y))
                }
                Op::Log(x) => acc(&mut grads, *x, Zip::from(&g).and(val(*x)).map_collect(|&g, &x| g / x)),
                Op::Log2(x) => acc(
                    &mut grads,
                    *x,
                    Zip::from(&g)
                        .and(val(*x))
                        .map_collect(|&g, &x| g / (x * std::f64::consts::LN_2)),
                ),
                Op::Exp(x) => acc(&mut grads, *x, Zip::from(&g).and(y).map_collect(|&g, &y| g * y)),
                Op::Relu(x) => acc(
                    &mut grads,
                    *x,
                    Zip::from(&g)
                        .and(val(*x))
                        .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 }),
                ),
                Op::Clamp(x, lo, hi) => acc(
                    &mut grads,
                    *x,
                    Zip::from(&g)
                        .and(val(*x))
                        .map_collect(|&g, &x| if x >= *lo && x <= *hi { g } else { 0.0 }),
                ),
                Op::SumRows(x) => {
                    let gx = g
                        .broadcast(val(*x).dim())
                        .expect("column broadcast")
                        .to_owned();
                    acc(&mut grads, *x, gx)
                }
                Op::SumAll(x) => acc(&mut grads, *x, Array2::from_elem(val(*x).dim(), g[[0, 0]])),
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        if need(*p) {
                            acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::Slice(x, start) => {
                    let mut gx = Array2::zeros(val(*x).dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let gx = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(val(*x).dim())
                        .expect("reshape adjoint");
                    acc(&mut grads, *x, gx);
                }
                Op::RepeatRows(x, k) => {
                    let (r, c) = val(*x).dim();
                    let gx = g
                        .into_shape_with_order((r, k * c))
                        .expect("standard layout");
                    let mut out = Array2::zeros((r, c));
                    for j in 0..*k {
                        out += &gx.slice(s![.., j * c..(j + 1) * c]);
                    }
                    acc(&mut grads, *x, out);
                }
                Op::L2Norm(x) => {
                    let xv = val(*x);
                    let mut gx = xv.clone();
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let d = y[[r, 0]].max(NORM_GUARD);
                        let gr = g[[r, 0]];
                        row.mapv_inplace(|v| gr * v / d);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Normalize(x) => {
                    let xv = val(*x);
                    let mut gx = g.clone();
                    for ((mut grow, yrow), xrow) in
                        gx.rows_mut().into_iter().zip(y.rows()).zip(xv.rows())
                    {
                        let norm = xrow.dot(&xrow).sqrt();
                        if norm > NORM_GUARD {
                            let proj = grow.dot(&yrow);
                            Zip::from(&mut grow)
                                .and(&yrow)
                                .for_each(|g, &y| *g = (*g - y * proj) / norm);
                        } else {
                            grow.mapv_inplace(|g| g / NORM_GUARD);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Softmax(x) => {
                    let mut gx = g.clone();
                    for (mut grow, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = grow.dot(&yrow);
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|g, &y| *g = y * (*g - dot));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    mode,
                    ..
                } => {
                    if need(*beta) {
                        acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if need(*gamma) {
                        acc(
                            &mut grads,
                            *gamma,
                            (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                        );
                    }
                    if need(*x) {
                        let dxhat = &g * val(*gamma);
                        let inv = inv_std.view().insert_axis(Axis(0));
                        let gx = match mode {
                            BatchNormMode::Infer => dxhat * &inv,
                            BatchNormMode::Train => {
                                let n = g.nrows() as f64;
                                let sum_d = dxhat.sum_axis(Axis(0)).insert_axis(Axis(0));
                                let sum_dx = (&dxhat * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                                ((dxhat * n - &sum_d) - &(xhat * &sum_dx)) * &inv / n
                            }
                        };
                        acc(&mut grads, *x, gx);
                    }
                }
                Op::Autocorr2d { x, antennas, taps } => {
                    let gx = autocorr_backward(val(*x).view(), g.view(), *antennas, *taps);
                    acc(&mut grads, *x, gx);
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
        })
    }
}

/// Finite-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;
/// Gradient magnitude below which [`grad_check`] compares absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares the tape gradient of a scalar graph against central finite
/// differences (step [`GRAD_CHECK_STEP`]) at `inputs`. Returns
/// `max |analytic - numeric| / max(GRAD_CHECK_FLOOR, |numeric|)` over all coordinates.
pub fn grad_check<F>(f: F, inputs: &[Array2<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Array2<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.shape(out) != (1, 1) {
            return invalid("grad_check: graph is not scalar-valued");
        }
        Ok(tape.value(out)[[0, 0]])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<Array2<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        for idx in ndarray::indices(input.dim()) {
            let orig = input[idx];
            work[i][idx] = orig + GRAD_CHECK_STEP;
            let plus = eval(&work)?;
            work[i][idx] = orig - GRAD_CHECK_STEP;
            let minus = eval(&work)?;
            work[i][idx] = orig;
            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
            // below the floor the comparison is absolute, so exact zeros
            // (e.g. a bias feeding batch norm) don't amplify roundoff
            let err = (analytic[idx] - numeric).abs() / numeric.abs().max(GRAD_CHECK_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Real block matrix `[[Re M, Im M], [-Im M, Re M]]` (`2n x 2m`) such that a
/// split row vector `[xr | xi]` times it equals the split form of the
/// complex row-vector product `x M` for a complex `n x m` matrix `M`.
pub fn complex_block_matrix(
    re: &Array2<f64>,
    im: &Array2<f64>,
) -> Array2<f64> {
    let (n, m) = re.dim();
    let mut out = Array2::zeros((2 * n, 2 * m));
    out.slice_mut(s![..n, ..m]).assign(re);
    out.slice_mut(s![..n, m..]).assign(im);
    out.slice_mut(s![n.., ..m]).assign(&im.mapv(|v| -v));
    out.slice_mut(s![n.., m..]).assign(re);
    out
}
