//! A small reverse-mode automatic differentiation engine over dense f64
//! tensors, sized for point-cloud networks: a forward pass records ops on a
//! tape ([`Graph`]), `backward` walks it once in reverse, and parameter
//! gradients are pulled out through explicit bindings.
//!
//! Everything is sequential and allocation-order deterministic: the same
//! inputs produce bitwise-identical values and gradients on a given
//! platform. Shapes are row-major; most ops work on matrices `[rows, cols]`
//! while reductions treat the last axis as the vector axis.

mod adam;
pub mod gradcheck;

pub use adam::{seeded_init, AdamConfig, ParamId, ParamSet, Parameter};

use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`]'s tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Add(TensorId, TensorId),
    /// `[n, c] + [c]`, bias broadcast over rows.
    AddBias(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    AddScalar(TensorId),
    MulScalar(TensorId, f64),
    Matmul(TensorId, TensorId),
    Relu(TensorId),
    /// Output row `i` copies input row `rows[i]`; duplicates allowed.
    GatherRows(TensorId, Vec<usize>),
    /// Max over groups of `k` consecutive rows; `argmax` caches the winning
    /// in-group row per output element (first index on ties).
    GroupMax {
        x: TensorId,
        k: usize,
        argmax: Vec<usize>,
    },
    ConcatCols(TensorId, TensorId),
    /// Euclidean norm of each last-axis vector.
    NormRows(TensorId),
    Sum(TensorId),
    Mean(TensorId),
    Reshape(TensorId),
    /// Copies the input with the listed rows forced to exactly +0.0;
    /// gradient is blocked on those rows.
    ZeroRows(TensorId, Vec<usize>),
    /// Output row `q` = sum of `weights[q][a] * src[indices[q][a]]`.
    InterpRows {
        src: TensorId,
        indices: Vec<[usize; 3]>,
        weights: Vec<[f64; 3]>,
    },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `out[n x m] += a[n x k] * b[k x m]`
fn matmul_nn_acc(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let row_out = &mut out[i * m..(i + 1) * m];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av != 0.0 {
                let row_b = &b[kk * m..(kk + 1) * m];
                for (o, &bv) in row_out.iter_mut().zip(row_b) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// `out[n x k] += a[n x m] * b^T`, with `b` stored `[k, m]`
fn matmul_nt_acc(a: &[f64], b: &[f64], n: usize, m: usize, k: usize, out: &mut [f64]) {
    for i in 0..n {
        let row_a = &a[i * m..(i + 1) * m];
        for kk in 0..k {
            let row_b = &b[kk * m..(kk + 1) * m];
            let mut acc = 0.0;
            for (av, bv) in row_a.iter().zip(row_b) {
                acc += av * bv;
            }
            out[i * k + kk] += acc;
        }
    }
}

/// `out[k x m] += a^T * b`, with `a` stored `[n, k]`, `b` stored `[n, m]`
fn matmul_tn_acc(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let row_b = &b[i * m..(i + 1) * m];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av != 0.0 {
                let row_out = &mut out[kk * m..(kk + 1) * m];
                for (o, &bv) in row_out.iter_mut().zip(row_b) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// Forward tape plus parameter bindings. Build one per forward pass, call
/// [`backward`](Graph::backward) on a scalar loss, then hand gradients back
/// to the [`ParamSet`] with [`ParamSet::accumulate_grads`].
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    /// (parameter, leaf) pairs bound by [`Graph::parameter`].
    bound: Vec<(ParamId, TensorId)>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: Vec::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, needs_grad: bool) -> TensorId {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            shape,
            values,
            op,
            needs_grad,
        });
        self.grads.push(Vec::new());
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.node(id).values
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(numel(&self.node(id).shape), 1);
        self.node(id).values[0]
    }

    /// Gradient of the last `backward` loss w.r.t. this node, if tracked.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        if self.grads[id.0].is_empty() {
            None
        } else {
            Some(&self.grads[id.0])
        }
    }

    pub(crate) fn bindings(&self) -> &[(ParamId, TensorId)] {
        &self.bound
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> TensorId {
        self.push(shape, values, Op::Constant, false)
    }

    /// A differentiable leaf that is not a managed parameter.
    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<f64>) -> TensorId {
        self.push(shape, values, Op::Leaf, true)
    }

    /// Binds a parameter as a differentiable leaf. Binding the same
    /// parameter again returns the same node, so shared weights accumulate
    /// their gradient through graph fan-out.
    pub fn parameter(&mut self, params: &ParamSet, id: ParamId) -> TensorId {
        if let Some(&(_, t)) = self.bound.iter().find(|&&(p, _)| p == id) {
            return t;
        }
        let p = params.get(id);
        let t = self.push(p.shape.clone(), p.values.clone(), Op::Leaf, true);
        self.bound.push((id, t));
        t
    }

    fn require_2d(&self, id: TensorId, what: &str) -> Result<(usize, usize)> {
        let s = &self.node(id).shape;
        if s.len() != 2 {
            return Err(Error::Argument(format!(
                "{what} needs a matrix, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    fn require_same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::Argument(format!(
                "{what} needs matching shapes, got {:?} and {:?}",
                self.node(a).shape,
                self.node(b).shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.require_same_shape(a, b, "add")?;
        let values = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(self.node(a).shape.clone(), values, Op::Add(a, b), ng))
    }

    /// `[n, c] + [c]`: adds a bias row to every row.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (n, c) = self.require_2d(x, "add_bias")?;
        if self.node(bias).shape != [c] {
            return Err(Error::Argument(format!(
                "bias shape {:?} does not match {c} columns",
                self.node(bias).shape
            )));
        }
        let mut values = self.node(x).values.clone();
        for i in 0..n {
            for (v, b) in values[i * c..(i + 1) * c].iter_mut().zip(&self.node(bias).values) {
                *v += b;
            }
        }
        let ng = self.node(x).needs_grad || self.node(bias).needs_grad;
        Ok(self.push(vec![n, c], values, Op::AddBias(x, bias), ng))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.require_same_shape(a, b, "sub")?;
        let values = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(self.node(a).shape.clone(), values, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.require_same_shape(a, b, "mul")?;
        let values = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(self.node(a).shape.clone(), values, Op::Mul(a, b), ng))
    }

    pub fn add_scalar(&mut self, x: TensorId, s: f64) -> TensorId {
        let values = self.node(x).values.iter().map(|v| v + s).collect();
        let ng = self.node(x).needs_grad;
        self.push(self.node(x).shape.clone(), values, Op::AddScalar(x), ng)
    }

    pub fn mul_scalar(&mut self, x: TensorId, s: f64) -> TensorId {
        let values = self.node(x).values.iter().map(|v| v * s).collect();
        let ng = self.node(x).needs_grad;
        self.push(self.node(x).shape.clone(), values, Op::MulScalar(x, s), ng)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, k) = self.require_2d(a, "matmul")?;
        let (k2, m) = self.require_2d(b, "matmul")?;
        if k != k2 {
            return Err(Error::Argument(format!(
                "matmul inner dimensions differ: {k} vs {k2}"
            )));
        }
        let mut values = vec![0.0; n * m];
        matmul_nn_acc(&self.node(a).values, &self.node(b).values, n, k, m, &mut values);
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(vec![n, m], values, Op::Matmul(a, b), ng))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let values = self.node(x).values.iter().map(|&v| v.max(0.0)).collect();
        let ng = self.node(x).needs_grad;
        self.push(self.node(x).shape.clone(), values, Op::Relu(x), ng)
    }

    /// Output row `i` = input row `rows[i]`. Duplicate rows are fine; their
    /// gradients accumulate.
    pub fn gather_rows(&mut self, x: TensorId, rows: Vec<usize>) -> Result<TensorId> {
        let (n, c) = self.require_2d(x, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Argument(format!(
                "gather_rows index {bad} out of range for {n} rows"
            )));
        }
        let mut values = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            values.extend_from_slice(&self.node(x).values[r * c..(r + 1) * c]);
        }
        let ng = self.node(x).needs_grad;
        let out_rows = rows.len();
        Ok(self.push(vec![out_rows, c], values, Op::GatherRows(x, rows), ng))
    }

    /// Max over groups of `k` consecutive rows: `[m*k, c] -> [m, c]`.
    /// Gradient flows only to the winning element per group and column,
    /// first row on ties.
    pub fn group_max(&mut self, x: TensorId, k: usize) -> Result<TensorId> {
        let (rows, c) = self.require_2d(x, "group_max")?;
        if k == 0 || rows % k != 0 {
            return Err(Error::Argument(format!(
                "group_max group size {k} must divide row count {rows}"
            )));
        }
        let m = rows / k;
        let xv = &self.node(x).values;
        let mut values = vec![f64::NEG_INFINITY; m * c];
        let mut argmax = vec![0usize; m * c];
        for g in 0..m {
            for r in 0..k {
                let row = &xv[(g * k + r) * c..(g * k + r + 1) * c];
                for (j, &v) in row.iter().enumerate() {
                    // strict '>' keeps the first row on ties
                    if v > values[g * c + j] {
                        values[g * c + j] = v;
                        argmax[g * c + j] = r;
                    }
                }
            }
        }
        let ng = self.node(x).needs_grad;
        Ok(self.push(vec![m, c], values, Op::GroupMax { x, k, argmax }, ng))
    }

    /// Concatenates two matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, ca) = self.require_2d(a, "concat_cols")?;
        let (n2, cb) = self.require_2d(b, "concat_cols")?;
        if n != n2 {
            return Err(Error::Argument(format!(
                "concat_cols row counts differ: {n} vs {n2}"
            )));
        }
        let mut values = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            values.extend_from_slice(&self.node(a).values[i * ca..(i + 1) * ca]);
            values.extend_from_slice(&self.node(b).values[i * cb..(i + 1) * cb]);
        }
        let ng = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(vec![n, ca + cb], values, Op::ConcatCols(a, b), ng))
    }

    /// Euclidean norm of every last-axis vector: `[.., d] -> [..]`.
    /// The gradient at an exactly zero vector is taken as zero.
    pub fn norm_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let s = &self.node(x).shape;
        if s.is_empty() {
            return Err(Error::Argument("norm_rows needs at least 1 axis".into()));
        }
        let d = *s.last().expect("non-empty");
        if d == 0 {
            return Err(Error::Argument("norm_rows over empty vectors".into()));
        }
        let rows = numel(s) / d;
        let xv = &self.node(x).values;
        let values = (0..rows)
            .map(|i| xv[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out_shape = s[..s.len() - 1].to_vec();
        let ng = self.node(x).needs_grad;
        Ok(self.push(out_shape, values, Op::NormRows(x), ng))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let v = self.node(x).values.iter().sum();
        let ng = self.node(x).needs_grad;
        self.push(vec![], vec![v], Op::Sum(x), ng)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.node(x).values.len().max(1);
        let v = self.node(x).values.iter().sum::<f64>() / n as f64;
        let ng = self.node(x).needs_grad;
        self.push(vec![], vec![v], Op::Mean(x), ng)
    }

    /// Same data, new shape with equal element count.
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel(&shape) != self.node(x).values.len() {
            return Err(Error::Argument(format!(
                "reshape to {:?} changes element count",
                shape
            )));
        }
        let values = self.node(x).values.clone();
        let ng = self.node(x).needs_grad;
        Ok(self.push(shape, values, Op::Reshape(x), ng))
    }

    /// Copies the matrix with the listed rows set to exactly +0.0; those
    /// rows also block the gradient. Used for hard region constraints.
    pub fn zero_rows(&mut self, x: TensorId, rows: Vec<usize>) -> Result<TensorId> {
        let (n, c) = self.require_2d(x, "zero_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Argument(format!(
                "zero_rows index {bad} out of range for {n} rows"
            )));
        }
        let mut values = self.node(x).values.clone();
        for &r in &rows {
            for v in &mut values[r * c..(r + 1) * c] {
                *v = 0.0;
            }
        }
        let ng = self.node(x).needs_grad;
        Ok(self.push(vec![n, c], values, Op::ZeroRows(x, rows), ng))
    }

    /// Weighted gather: output row `q` is the convex combination of three
    /// source rows given by precomputed interpolation weights.
    pub fn interpolate_rows(
        &mut self,
        src: TensorId,
        interp: &crate::sampling::InterpolationWeights,
    ) -> Result<TensorId> {
        let (n, c) = self.require_2d(src, "interpolate_rows")?;
        if let Some(bad) = interp.indices.iter().flatten().find(|&&i| i >= n) {
            return Err(Error::Argument(format!(
                "interpolation index {bad} out of range for {n} rows"
            )));
        }
        let q = interp.indices.len();
        let sv = &self.node(src).values;
        let mut values = vec![0.0; q * c];
        for (qi, (idx, w)) in interp.indices.iter().zip(&interp.weights).enumerate() {
            let out = &mut values[qi * c..(qi + 1) * c];
            for a in 0..3 {
                let row = &sv[idx[a] * c..(idx[a] + 1) * c];
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += w[a] * v;
                }
            }
        }
        let ng = self.node(src).needs_grad;
        Ok(self.push(
            vec![q, c],
            values,
            Op::InterpRows {
                src,
                indices: interp.indices.clone(),
                weights: interp.weights.clone(),
            },
            ng,
        ))
    }

    fn ensure_grad(&mut self, id: TensorId) {
        if self.grads[id.0].is_empty() {
            self.grads[id.0] = vec![0.0; self.nodes[id.0].values.len()];
        }
    }

    /// Reverse pass from a scalar loss. Populates gradients for every node
    /// on a differentiable path; read them through [`Graph::grad`] or pull
    /// parameter gradients with [`ParamSet::accumulate_grads`].
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if numel(&self.node(loss).shape) != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        for g in &mut self.grads {
            g.clear();
        }
        self.grads[loss.0] = vec![1.0];

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_empty() || !self.nodes[i].needs_grad {
                continue;
            }
            let go = std::mem::take(&mut self.grads[i]);
            // local closure-free dispatch; each arm scatters into inputs
            match &self.nodes[i].op {
                Op::Constant | Op::Leaf => {}
                &Op::Add(a, b) => {
                    for (t, sign) in [(a, 1.0), (b, 1.0)] {
                        let _ = sign;
                        if self.nodes[t.0].needs_grad {
                            self.ensure_grad(t);
                            for (g, &o) in self.grads[t.0].iter_mut().zip(&go) {
                                *g += o;
                            }
                        }
                    }
                }
                &Op::AddBias(x, bias) => {
                    let c = self.nodes[bias.0].values.len();
                    if self.nodes[x.0].needs_grad {
                        self.ensure_grad(x);
                        for (g, &o) in self.grads[x.0].iter_mut().zip(&go) {
                            *g += o;
                        }
                    }
                    if self.nodes[bias.0].needs_grad {
                        self.ensure_grad(bias);
                        for (j, &o) in go.iter().enumerate() {
                            self.grads[bias.0][j % c] += o;
                        }
                    }
                }
                &Op::Sub(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        self.ensure_grad(a);
                        for (g, &o) in self.grads[a.0].iter_mut().zip(&go) {
                            *g += o;
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        self.ensure_grad(b);
                        for (g, &o) in self.grads[b.0].iter_mut().zip(&go) {
                            *g -= o;
                        }
                    }
                }
                &Op::Mul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        self.ensure_grad(a);
                        for j in 0..go.len() {
                            self.grads[a.0][j] += go[j] * self.nodes[b.0].values[j];
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        self.ensure_grad(b);
                        for j in 0..go.len() {
                            self.grads[b.0][j] += go[j] * self.nodes[a.0].values[j];
                        }
                    }
                }
                &Op::AddScalar(x) => {
                    if self.nodes[x.0].needs_grad {
                        self.ensure_grad(x);
                        for (g, &o) in self.grads[x.0].iter_mut().zip(&go) {
                            *g += o;
                        }
                    }
                }
                &Op::MulScalar(x, s) => {
                    if self.nodes[x.0].needs_grad {
                        self.ensure_grad(x);
                        for (g, &o) in self.grads[x.0].iter_mut().zip(&go) {
                            *g += o * s;
                        }
                    }
                }
                &Op::Matmul(a, b) => {
                    let n = self.nodes[a.0].shape[0];
                    let k = self.nodes[a.0].shape[1];
                    let m = self.nodes[b.0].shape[1];
                    if self.nodes[a.0].needs_grad {
                        self.ensure_grad(a);
                        let bv = std::mem::take(&mut self.nodes[b.0].values);
                        matmul_nt_acc(&go, &bv, n, m, k, &mut self.grads[a.0]);
                        self.nodes[b.0].values = bv;
                    }
                    if self.nodes[b.0].needs_grad {
                        self.ensure_grad(b);
                        let av = std::mem::take(&mut self.nodes[a.0].values);
                        matmul_tn_acc(&av, &go, n, k, m, &mut self.grads[b.0]);
                        self.nodes[a.0].values = av;
                    }
                }
                &Op::Relu(x) => {
                    if self.nodes[x.0].needs_grad {
                        self.ensure_grad(x);
                        for j in 0..go.len() {
                            if self.nodes[x.0].values[j] > 0.0 {
                                self.grads[x.0][j] += go[j];
                            }
                        }
                    }
                }
                Op::GatherRows(x, rows) => {
                    let x = *x;
                    if self.nodes[x.0].needs_grad {
                        let c = self.nodes[x.0].shape[1];
                        let rows = rows.clone();
                        self.ensure_grad(x);
                        for (out_r, &src_r) in rows.iter().enumerate() {
                            for j in 0..c {
                                self.grads[x.0][src_r * c + j] += go[out_r * c + j];
                            }
                        }
                    }
                }
                Op::GroupMax { x, k, argmax } => {
                    let x = *x;
                    let k = *k;
                    if self.nodes[x.0].needs_grad {
                        let c = self.nodes[x.0].shape[1];
                        let argmax = argmax.clone();
                        self.ensure_grad(x);
                        let m = go.len() / c;
                        for g in 0..m {
                            for j in 0..c {
                                let r = argmax[g * c + j];
                                self.grads[x.0][(g * k + r) * c + j] += go[g * c + j];
                            }
                        }
                    }
                }
                &Op::ConcatCols(a, b) => {
                    let ca = self.nodes[a.0].shape[1];
                    let cb = self.nodes[b.0].shape[1];
                    let n = self.nodes[a.0].shape[0];
                    if self.nodes[a.0].needs_grad {
                        self.ensure_grad(a);
                        for i in 0..n {
                            for j in 0..ca {
                                self.grads[a.0][i * ca + j] += go[i * (ca + cb) + j];
                            }
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        self.ensure_grad(b);
                        for i in 0..n {
                            for j in 0..cb {
                                self.grads[b.0][i * cb + j] += go[i * (ca + cb) + ca + j];
                            }
                        }
                    }
                }
                &Op::NormRows(x) => {
                    if self.nodes[x.0].needs_grad {
                        let d = *self.nodes[x.0].shape.last().expect("non-empty");
                        self.ensure_grad(x);
                        for (r, &o) in go.iter().enumerate() {
                            let norm = self.nodes[i].values[r];
                            if norm > 1e-12 {
                                for j in 0..d {
                                    let xv = self.nodes[x.0].values[r * d + j];
                                    self.grads[x.0][r * d + j] += o * xv / norm;
                                }
                            }
                        }
                    }
                }
                &Op::Sum(x) => {
                    if self.nodes[x.0].needs_grad {
                        self.ensure_grad(x);
                        for g in self.grads[x.0].iter_mut() {
                            *g += go[0];
                        }
                    }
                }
                &Op::Mean(x) => {
                    if self.nodes[x.0].needs_grad {
                        self.ensure_grad(x);
                        let scale = 1.0 / self.nodes[x.0].values.len().max(1) as f64;
                        for g in self.grads[x.0].iter_mut() {
                            *g += go[0] * scale;
                        }
                    }
                }
                &Op::Reshape(x) => {
                    if self.nodes[x.0].needs_grad {
                        self.ensure_grad(x);
                        for (g, &o) in self.grads[x.0].iter_mut().zip(&go) {
                            *g += o;
                        }
                    }
                }
                Op::ZeroRows(x, rows) => {
                    let x = *x;
                    if self.nodes[x.0].needs_grad {
                        let c = self.nodes[x.0].shape[1];
                        let mut masked = go.clone();
                        for &r in rows {
                            for v in &mut masked[r * c..(r + 1) * c] {
                                *v = 0.0;
                            }
                        }
                        self.ensure_grad(x);
                        for (g, &o) in self.grads[x.0].iter_mut().zip(&masked) {
                            *g += o;
                        }
                    }
                }
                Op::InterpRows {
                    src,
                    indices,
                    weights,
                } => {
                    let src = *src;
                    if self.nodes[src.0].needs_grad {
                        let c = self.nodes[src.0].shape[1];
                        let pairs: Vec<([usize; 3], [f64; 3])> =
                            indices.iter().copied().zip(weights.iter().copied()).collect();
                        self.ensure_grad(src);
                        for (qi, (idx, w)) in pairs.iter().enumerate() {
                            for a in 0..3 {
                                for j in 0..c {
                                    self.grads[src.0][idx[a] * c + j] += w[a] * go[qi * c + j];
                                }
                            }
                        }
                    }
                }
            }
            self.grads[i] = go;
        }
        Ok(())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}
