//! Tape-based reverse-mode differentiation over matrices.
//!
//! A forward pass records primitive operations on a [`Tape`]; [`Tape::backward`]
//! replays them in strict reverse order, accumulating vector-Jacobian products
//! into per-parameter gradients. The op set is exactly what the routing layer
//! and the desk model need — this is not a general tensor library.
//!
//! Discrete choices (top-k membership, slot rounding) are never recorded;
//! callers bake them into constant masks, so gradients flow only through the
//! continuous weights of selected branches.

use crate::error::{Error, Result};
use crate::numerics::matrix::sigmoid;
use crate::numerics::{Matrix, ParamSet};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    /// `a[i,j] + v[0,j]`; `v` is a 1xC row vector.
    AddRowVec(usize, usize),
    Mul(usize, usize),
    /// `a[i,j] * c[i,0]`; `c` is an Rx1 column vector.
    MulColBroadcast(usize, usize),
    /// `a[i,j] / c[i,0]`.
    DivColBroadcast(usize, usize),
    Sigmoid(usize),
    Relu(usize),
    Square(usize),
    Scale(usize, f64),
    AddConst(usize),
    Sum(usize),
    Mean(usize),
    /// Per-row sum over columns `lo..hi`, yielding Rx1.
    RowSumRange(usize, usize, usize),
    /// Column `j` as Rx1.
    ColSlice(usize, usize),
    /// Columns `lo..hi` as a submatrix.
    ColRange(usize, usize, usize),
    /// Column means, yielding 1xC.
    ColMean(usize),
    /// Rows of `table` gathered by index; backward scatter-adds.
    GatherRows(usize, Vec<usize>),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        /// Cached normalized rows.
        xhat: Matrix,
        /// Cached per-row inverse stddev.
        istd: Vec<f64>,
    },
    SoftmaxRows(usize),
    /// Importance modulation: real columns scaled by `1 + alpha*w[i]`,
    /// virtual columns by `1 - alpha*w[i]`.
    Modulate {
        logits: usize,
        w: usize,
        alpha: f64,
        real_cols: usize,
    },
    /// Elementwise product with a constant matrix (selection masks, load vectors).
    MaskMul(usize, Matrix),
    /// Mean negative log-softmax of the target class per row.
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        /// Cached row softmax.
        probs: Matrix,
    },
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Records a computation and its parameter registry.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
}

/// Name -> [`Var`] lookup for one registered [`ParamSet`].
pub struct TapeParams {
    map: Vec<(String, Var)>,
}

impl TapeParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.map
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Contract(format!("parameter {name} not registered on tape")))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant; gradients stop here.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Op::Leaf, m)
    }

    /// Record a named parameter; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, name: &str, m: Matrix) -> Var {
        let v = self.push(Op::Leaf, m);
        self.params.push((name.to_string(), v.0));
        v
    }

    /// Register every parameter in `ps`, in its canonical order.
    pub fn register_params(&mut self, ps: &ParamSet) -> TapeParams {
        let map = ps
            .iter()
            .map(|(name, m)| (name.to_string(), self.param(name, m.clone())))
            .collect();
        TapeParams { map }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.get(0, 0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- binary ops ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::Matmul(a.0, b.0), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a.0, b.0), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a.0, b.0), value))
    }

    /// Add a 1xC row vector to every row of `a`.
    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (am, vm) = (self.value(a), self.value(v));
        if vm.rows() != 1 || vm.cols() != am.cols() {
            return Err(Error::dim("add_row_vec", am.shape(), vm.shape()));
        }
        let value = Matrix::from_fn(am.rows(), am.cols(), |i, j| am.get(i, j) + vm.get(0, j));
        Ok(self.push(Op::AddRowVec(a.0, v.0), value))
    }

    /// Multiply every row of `a` by the matching entry of column vector `c`.
    pub fn mul_col_broadcast(&mut self, a: Var, c: Var) -> Result<Var> {
        let (am, cm) = (self.value(a), self.value(c));
        if cm.cols() != 1 || cm.rows() != am.rows() {
            return Err(Error::dim("mul_col_broadcast", am.shape(), cm.shape()));
        }
        let value = Matrix::from_fn(am.rows(), am.cols(), |i, j| am.get(i, j) * cm.get(i, 0));
        Ok(self.push(Op::MulColBroadcast(a.0, c.0), value))
    }

    /// Divide every row of `a` by the matching entry of column vector `c`.
    pub fn div_col_broadcast(&mut self, a: Var, c: Var) -> Result<Var> {
        let (am, cm) = (self.value(a), self.value(c));
        if cm.cols() != 1 || cm.rows() != am.rows() {
            return Err(Error::dim("div_col_broadcast", am.shape(), cm.shape()));
        }
        let value = Matrix::from_fn(am.rows(), am.cols(), |i, j| am.get(i, j) / cm.get(i, 0));
        Ok(self.push(Op::DivColBroadcast(a.0, c.0), value))
    }

    // ---- unary ops -------------------------------------------------------

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a.0), value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a.0), value)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(Op::Square(a.0), value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a.0, c), value)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(Op::AddConst(a.0), value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a.0), Matrix::filled(1, 1, s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.is_empty() {
            return Err(Error::Contract("mean of empty matrix".to_string()));
        }
        let s = m.data().iter().sum::<f64>() / m.len() as f64;
        Ok(self.push(Op::Mean(a.0), Matrix::filled(1, 1, s)))
    }

    // ---- shape ops -------------------------------------------------------

    /// Per-row sum over columns `lo..hi`, yielding an Rx1 column.
    pub fn row_sum_range(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let m = self.value(a);
        if lo > hi || hi > m.cols() {
            return Err(Error::Contract(format!(
                "row_sum_range {lo}..{hi} out of bounds for {} cols",
                m.cols()
            )));
        }
        let value = Matrix::from_fn(m.rows(), 1, |i, _| m.row(i)[lo..hi].iter().sum());
        Ok(self.push(Op::RowSumRange(a.0, lo, hi), value))
    }

    pub fn col_slice(&mut self, a: Var, j: usize) -> Result<Var> {
        let m = self.value(a);
        if j >= m.cols() {
            return Err(Error::Contract(format!(
                "col_slice {j} out of bounds for {} cols",
                m.cols()
            )));
        }
        let value = Matrix::from_fn(m.rows(), 1, |i, _| m.get(i, j));
        Ok(self.push(Op::ColSlice(a.0, j), value))
    }

    pub fn col_range(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let m = self.value(a);
        if lo > hi || hi > m.cols() {
            return Err(Error::Contract(format!(
                "col_range {lo}..{hi} out of bounds for {} cols",
                m.cols()
            )));
        }
        let value = Matrix::from_fn(m.rows(), hi - lo, |i, j| m.get(i, lo + j));
        Ok(self.push(Op::ColRange(a.0, lo, hi), value))
    }

    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.rows() == 0 {
            return Err(Error::Contract("col_mean of empty matrix".to_string()));
        }
        let n = m.rows() as f64;
        let value = Matrix::from_fn(1, m.cols(), |_, j| {
            (0..m.rows()).map(|i| m.get(i, j)).sum::<f64>() / n
        });
        Ok(self.push(Op::ColMean(a.0), value))
    }

    /// Gather rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        for &ix in indices {
            if ix >= t.rows() {
                return Err(Error::Contract(format!(
                    "gather_rows index {ix} out of bounds for {} rows",
                    t.rows()
                )));
            }
        }
        let value = Matrix::from_fn(indices.len(), t.cols(), |i, j| t.get(indices[i], j));
        Ok(self.push(Op::GatherRows(table.0, indices.to_vec()), value))
    }

    /// Row-wise LayerNorm with learned gain and bias (both 1xD).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xm, gm, bm) = (self.value(x), self.value(gain), self.value(bias));
        let d = xm.cols();
        if d == 0 {
            return Err(Error::Contract("layer_norm on empty input".to_string()));
        }
        if gm.shape() != (1, d) {
            return Err(Error::dim("layer_norm gain", xm.shape(), gm.shape()));
        }
        if bm.shape() != (1, d) {
            return Err(Error::dim("layer_norm bias", xm.shape(), bm.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let n = xm.rows();
        let mut xhat = Matrix::zeros(n, d);
        let mut istd = vec![0.0; n];
        for i in 0..n {
            let row = xm.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            istd[i] = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                xhat.set(i, j, (row[j] - mean) * istd[i]);
            }
        }
        let value = Matrix::from_fn(n, d, |i, j| xhat.get(i, j) * gm.get(0, j) + bm.get(0, j));
        Ok(self.push(
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                istd,
            },
            value,
        ))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = softmax_matrix(m);
        self.push(Op::SoftmaxRows(a.0), value)
    }

    /// Scale real-expert columns by `1 + alpha*w[i]` and virtual columns by
    /// `1 - alpha*w[i]`. Errors if any `alpha*w[i] >= 1` (the virtual factor
    /// would be non-positive).
    pub fn modulate(&mut self, logits: Var, w: Var, alpha: f64, real_cols: usize) -> Result<Var> {
        let (lm, wm) = (self.value(logits), self.value(w));
        if wm.cols() != 1 || wm.rows() != lm.rows() {
            return Err(Error::dim("modulate", lm.shape(), wm.shape()));
        }
        if real_cols > lm.cols() {
            return Err(Error::Contract(format!(
                "modulate real_cols {real_cols} exceeds {} columns",
                lm.cols()
            )));
        }
        if alpha < 0.0 {
            return Err(Error::Config(format!("modulation alpha must be >= 0, got {alpha}")));
        }
        for i in 0..wm.rows() {
            if alpha * wm.get(i, 0) >= 1.0 {
                return Err(Error::Config(format!(
                    "alpha*w = {} >= 1 at token {i}: virtual modulation factor would be non-positive",
                    alpha * wm.get(i, 0)
                )));
            }
        }
        let value = Matrix::from_fn(lm.rows(), lm.cols(), |i, j| {
            let phi = if j < real_cols {
                1.0 + alpha * wm.get(i, 0)
            } else {
                1.0 - alpha * wm.get(i, 0)
            };
            lm.get(i, j) * phi
        });
        Ok(self.push(
            Op::Modulate {
                logits: logits.0,
                w: w.0,
                alpha,
                real_cols,
            },
            value,
        ))
    }

    /// Elementwise product with a constant matrix.
    pub fn mask_mul(&mut self, a: Var, mask: Matrix) -> Result<Var> {
        let value = self.value(a).zip_map(&mask, |x, m| x * m)?;
        Ok(self.push(Op::MaskMul(a.0, mask), value))
    }

    /// Mean negative log-softmax probability of the target class per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lm = self.value(logits);
        if targets.len() != lm.rows() {
            return Err(Error::Contract(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                lm.rows()
            )));
        }
        if lm.rows() == 0 {
            return Err(Error::Contract("cross_entropy on empty batch".to_string()));
        }
        for &t in targets {
            if t >= lm.cols() {
                return Err(Error::Contract(format!(
                    "cross_entropy target {t} out of vocabulary {}",
                    lm.cols()
                )));
            }
        }
        let probs = softmax_matrix(lm);
        let n = lm.rows();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            loss -= probs.get(i, t).max(f64::MIN_POSITIVE).ln();
        }
        loss /= n as f64;
        Ok(self.push(
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            Matrix::filled(1, 1, loss),
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulate d(loss)/d(param) for every registered parameter.
    /// `loss` must be a 1x1 node. Parameters the loss does not reach get
    /// zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<ParamSet> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got {}x{}",
                self.value(loss).rows(),
                self.value(loss).cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    // keep for the registry below
                    grads[i] = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let da = g.matmul(&self.nodes[*b].value.transpose())?;
                    let db = self.nodes[*a].value.transpose().matmul(&g)?;
                    acc(&mut grads, *a, da)?;
                    acc(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone())?;
                    acc(&mut grads, *b, g)?;
                }
                Op::AddRowVec(a, v) => {
                    let dv = Matrix::from_fn(1, g.cols(), |_, j| {
                        (0..g.rows()).map(|i| g.get(i, j)).sum()
                    });
                    acc(&mut grads, *a, g)?;
                    acc(&mut grads, *v, dv)?;
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(&self.nodes[*b].value, |x, y| x * y)?;
                    let db = g.zip_map(&self.nodes[*a].value, |x, y| x * y)?;
                    acc(&mut grads, *a, da)?;
                    acc(&mut grads, *b, db)?;
                }
                Op::MulColBroadcast(a, c) => {
                    let cm = &self.nodes[*c].value;
                    let am = &self.nodes[*a].value;
                    let da = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * cm.get(i, 0));
                    let dc = Matrix::from_fn(g.rows(), 1, |i, _| {
                        (0..g.cols()).map(|j| g.get(i, j) * am.get(i, j)).sum()
                    });
                    acc(&mut grads, *a, da)?;
                    acc(&mut grads, *c, dc)?;
                }
                Op::DivColBroadcast(a, c) => {
                    let cm = &self.nodes[*c].value;
                    let am = &self.nodes[*a].value;
                    let da = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) / cm.get(i, 0));
                    let dc = Matrix::from_fn(g.rows(), 1, |i, _| {
                        let ci = cm.get(i, 0);
                        -(0..g.cols())
                            .map(|j| g.get(i, j) * am.get(i, j))
                            .sum::<f64>()
                            / (ci * ci)
                    });
                    acc(&mut grads, *a, da)?;
                    acc(&mut grads, *c, dc)?;
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let da = g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi))?;
                    acc(&mut grads, *a, da)?;
                }
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    let da = g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 })?;
                    acc(&mut grads, *a, da)?;
                }
                Op::Square(a) => {
                    let x = &self.nodes[*a].value;
                    let da = g.zip_map(x, |gi, xi| 2.0 * xi * gi)?;
                    acc(&mut grads, *a, da)?;
                }
                Op::Scale(a, c) => {
                    acc(&mut grads, *a, g.map(|x| x * c))?;
                }
                Op::AddConst(a) => {
                    acc(&mut grads, *a, g)?;
                }
                Op::Sum(a) => {
                    let s = g.get(0, 0);
                    let shape = self.nodes[*a].value.shape();
                    acc(&mut grads, *a, Matrix::filled(shape.0, shape.1, s))?;
                }
                Op::Mean(a) => {
                    let shape = self.nodes[*a].value.shape();
                    let s = g.get(0, 0) / (shape.0 * shape.1) as f64;
                    acc(&mut grads, *a, Matrix::filled(shape.0, shape.1, s))?;
                }
                Op::RowSumRange(a, lo, hi) => {
                    let shape = self.nodes[*a].value.shape();
                    let da = Matrix::from_fn(shape.0, shape.1, |i, j| {
                        if j >= *lo && j < *hi {
                            g.get(i, 0)
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, da)?;
                }
                Op::ColSlice(a, col) => {
                    let shape = self.nodes[*a].value.shape();
                    let da = Matrix::from_fn(shape.0, shape.1, |i, j| {
                        if j == *col {
                            g.get(i, 0)
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, da)?;
                }
                Op::ColRange(a, lo, _hi) => {
                    let shape = self.nodes[*a].value.shape();
                    let da = Matrix::from_fn(shape.0, shape.1, |i, j| {
                        if j >= *lo && j < *lo + g.cols() {
                            g.get(i, j - *lo)
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, da)?;
                }
                Op::ColMean(a) => {
                    let shape = self.nodes[*a].value.shape();
                    let n = shape.0 as f64;
                    let da = Matrix::from_fn(shape.0, shape.1, |_, j| g.get(0, j) / n);
                    acc(&mut grads, *a, da)?;
                }
                Op::GatherRows(table, indices) => {
                    let shape = self.nodes[*table].value.shape();
                    let mut dt = Matrix::zeros(shape.0, shape.1);
                    for (i, &ix) in indices.iter().enumerate() {
                        for j in 0..shape.1 {
                            let v = dt.get(ix, j) + g.get(i, j);
                            dt.set(ix, j, v);
                        }
                    }
                    acc(&mut grads, *table, dt)?;
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    istd,
                } => {
                    let gm = &self.nodes[*gain].value;
                    let (n, d) = xhat.shape();
                    let dgain = Matrix::from_fn(1, d, |_, j| {
                        (0..n).map(|i| g.get(i, j) * xhat.get(i, j)).sum()
                    });
                    let dbias =
                        Matrix::from_fn(1, d, |_, j| (0..n).map(|i| g.get(i, j)).sum());
                    let mut dx = Matrix::zeros(n, d);
                    for i in 0..n {
                        // dxhat = g * gain for this row
                        let dxhat: Vec<f64> =
                            (0..d).map(|j| g.get(i, j) * gm.get(0, j)).collect();
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat
                            .iter()
                            .enumerate()
                            .map(|(j, &v)| v * xhat.get(i, j))
                            .sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            dx.set(i, j, istd[i] * (dxhat[j] - m1 - xhat.get(i, j) * m2));
                        }
                    }
                    let (x, gain, bias) = (*x, *gain, *bias);
                    acc(&mut grads, x, dx)?;
                    acc(&mut grads, gain, dgain)?;
                    acc(&mut grads, bias, dbias)?;
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (n, c) = y.shape();
                    let mut da = Matrix::zeros(n, c);
                    for i in 0..n {
                        let dot: f64 = (0..c).map(|j| g.get(i, j) * y.get(i, j)).sum();
                        for j in 0..c {
                            da.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                    acc(&mut grads, *a, da)?;
                }
                Op::Modulate {
                    logits,
                    w,
                    alpha,
                    real_cols,
                } => {
                    let lm = &self.nodes[*logits].value;
                    let wm = &self.nodes[*w].value;
                    let dl = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                        let phi = if j < *real_cols {
                            1.0 + alpha * wm.get(i, 0)
                        } else {
                            1.0 - alpha * wm.get(i, 0)
                        };
                        g.get(i, j) * phi
                    });
                    let dw = Matrix::from_fn(g.rows(), 1, |i, _| {
                        (0..g.cols())
                            .map(|j| {
                                let sign = if j < *real_cols { 1.0 } else { -1.0 };
                                g.get(i, j) * lm.get(i, j) * sign * alpha
                            })
                            .sum()
                    });
                    let (logits, w) = (*logits, *w);
                    acc(&mut grads, logits, dl)?;
                    acc(&mut grads, w, dw)?;
                }
                Op::MaskMul(a, mask) => {
                    let da = g.zip_map(mask, |x, m| x * m)?;
                    acc(&mut grads, *a, da)?;
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let gs = g.get(0, 0);
                    let n = probs.rows() as f64;
                    let dl = Matrix::from_fn(probs.rows(), probs.cols(), |i, j| {
                        let onehot = if targets[i] == j { 1.0 } else { 0.0 };
                        gs * (probs.get(i, j) - onehot) / n
                    });
                    acc(&mut grads, *logits, dl)?;
                }
            }
        }

        let mut out = ParamSet::new();
        for (name, idx) in &self.params {
            let shape = self.nodes[*idx].value.shape();
            let grad = grads[*idx]
                .take()
                .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
            debug_assert_eq!(grad.shape(), shape);
            out.insert(name, grad);
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Matrix>], idx: usize, delta: Matrix) -> Result<()> {
    match &mut grads[idx] {
        Some(m) => m.add_assign(&delta)?,
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

fn softmax_matrix(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let row = m.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out.set(i, j, e);
            sum += e;
        }
        for j in 0..m.cols() {
            let v = out.get(i, j) / sum;
            out.set(i, j, v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let p = tape.param("p", Matrix::row_vec(vec![1.0, 2.0]));
        let sq = tape.square(p);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        let gp = grads.get("p").unwrap();
        assert_eq!(gp.data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_sigmoid_at_zero() {
        let mut tape = Tape::new();
        let p = tape.param("p", Matrix::filled(1, 1, 0.0));
        let loss = tape.sigmoid(p);
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get("p").unwrap().get(0, 0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let p = tape.param("p", Matrix::row_vec(vec![1.0, 2.0]));
        let sq = tape.square(p);
        assert!(tape.backward(sq).is_err());
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let c = tape.constant(Matrix::filled(1, 1, 0.0));
        let s = tape.sigmoid(c);
        assert_eq!(tape.scalar(s), 0.5);
    }

    #[test]
    fn square_example() {
        let mut tape = Tape::new();
        let c = tape.constant(Matrix::row_vec(vec![1.0, -2.0]));
        let s = tape.square(c);
        assert_eq!(tape.value(s).data(), &[1.0, 4.0]);
    }

    #[test]
    fn cross_entropy_uniform_two_class() {
        let mut tape = Tape::new();
        let logits = tape.constant(Matrix::row_vec(vec![0.0, 0.0]));
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        assert!((tape.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_target_out_of_vocab() {
        let mut tape = Tape::new();
        let logits = tape.constant(Matrix::row_vec(vec![0.0, 0.0]));
        assert!(tape.cross_entropy(logits, &[2]).is_err());
    }

    #[test]
    fn unreached_params_get_zero_grads() {
        let mut tape = Tape::new();
        let p = tape.param("used", Matrix::filled(1, 1, 2.0));
        let _unused = tape.param("unused", Matrix::filled(2, 2, 1.0));
        let sq = tape.square(p);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("unused").unwrap(), &Matrix::zeros(2, 2));
        assert_eq!(grads.get("used").unwrap().get(0, 0), 4.0);
    }

    #[test]
    fn matmul_associativity_random_triples() {
        let mut rng = crate::numerics::Rng::new(5);
        for _ in 0..10 {
            let a = Matrix::from_fn(3, 4, |_, _| rng.range_f64(-2.0, 2.0));
            let b = Matrix::from_fn(4, 5, |_, _| rng.range_f64(-2.0, 2.0));
            let c = Matrix::from_fn(5, 2, |_, _| rng.range_f64(-2.0, 2.0));
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            assert!(left.max_abs_diff(&right).unwrap() < 1e-9);
        }
    }
}
