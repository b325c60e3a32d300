//! Define-by-run computation graph with a reverse sweep.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation computes its
//! value eagerly and records how to propagate an upstream gradient to its
//! inputs. Nodes are topologically ordered by construction, so backward is a
//! single reverse pass over the node list.

use std::f64::consts::PI;

use crate::error::{AutodiffError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{dims2, Tensor};

/// Lower bound applied to the argument of every logarithm.
pub const LOG_FLOOR: f64 = 1e-30;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Softmax(Var),
    GaussianLogDensity { x: Var, mean: Var, std: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Silu(..) => "silu",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Softplus(..) => "softplus",
            Op::Clamp(..) => "clamp",
            Op::Minimum(..) => "minimum",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::GaussianLogDensity { .. } => "gaussian_log_density",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Leaf handles for every tensor of a [`ParamStore`], in store order.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardMode {
    /// Keep gradients of leaves only; intermediates are dropped as the sweep
    /// passes them.
    ParamsOnly,
    /// Keep the gradient of every node.
    RetainIntermediates,
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    leaf: Vec<bool>,
    lens: Vec<usize>,
    mode: BackwardMode,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v`, zero-filled when no path reaches it.
    pub fn wrt(&self, v: Var) -> Result<Vec<f64>> {
        if v.0 >= self.grads.len() {
            // Node created after the root: the root cannot depend on it.
            return Err(AutodiffError::InvalidArgument(format!(
                "node {} is not an ancestor of the backward root",
                v.0
            )));
        }
        if self.mode == BackwardMode::ParamsOnly && !self.leaf[v.0] {
            return Err(AutodiffError::IntermediateNotRetained(v.0));
        }
        Ok(self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; self.lens[v.0]]))
    }

    /// Gradients for every bound parameter, aligned with the store.
    pub fn for_params(&self, bound: &BoundParams) -> Vec<Vec<f64>> {
        bound
            .vars
            .iter()
            .map(|&v| match self.get(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; self.lens.get(v.0).copied().unwrap_or(0)],
            })
            .collect()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    log_clamps: u64,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of logarithm arguments raised to [`LOG_FLOOR`] so far.
    pub fn log_clamp_events(&self) -> u64 {
        self.log_clamps
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    fn dims(&self, v: Var) -> (usize, usize) {
        dims2(self.nodes[v.0].value.shape())
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copy of `x` cut from the graph: no gradient flows through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    /// Adds one leaf per tensor of `store`. Leaves of a non-trainable binding
    /// (target networks, frozen snapshots) are constants.
    pub fn bind(&mut self, store: &ParamStore, trainable: bool) -> BoundParams {
        let vars = store
            .tensors()
            .iter()
            .map(|t| self.push(t.clone(), Op::Leaf, trainable))
            .collect();
        BoundParams { vars }
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data).expect("same length"), op, rg)
    }

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), (k, 1), self.data(b), (n, 1), &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("add", a, b)?;
        Ok(self.binary(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("sub", a, b)?;
        Ok(self.binary(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mul", a, b)?;
        Ok(self.binary(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("minimum", a, b)?;
        Ok(self.binary(Op::Minimum(a, b), a, b, f64::min))
    }

    /// `x[r, j] + row[j]`: broadcasts a row vector over the batch axis.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, row, Op::AddRow(x, row), |a, b| a + b)
    }

    /// `x[r, j] * row[j]`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, row, Op::MulRow(x, row), |a, b| a * b)
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        x: Var,
        row: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.nodes[row.0].value.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                left: self.shape(x).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let xs = self.data(x);
        let rs = self.data(row);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            out.extend(xs[r * n..(r + 1) * n].iter().zip(rs).map(|(&a, &b)| f(a, b)));
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    /// `x[r, j] * col[r]` for a `[rows, 1]` column.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(col) != (m, 1) {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul_col",
                left: self.shape(x).to_vec(),
                right: self.shape(col).to_vec(),
            });
        }
        let xs = self.data(x);
        let cs = self.data(col);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            out.extend(xs[r * n..(r + 1) * n].iter().map(|&a| a * cs[r]));
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(col);
        Ok(self.push(Tensor::new(shape, out)?, Op::MulCol(x, col), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Op::Scale(x, c), x, |v| c * v)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(Op::AddScalar(x), x, |v| v + c)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Op::Tanh(x), x, f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Op::Sigmoid(x), x, sigmoid)
    }

    /// `x * sigmoid(x)`, also known as swish.
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(Op::Silu(x), x, |v| v * sigmoid(v))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Op::Relu(x), x, |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Op::Exp(x), x, f64::exp)
    }

    /// Natural log with the argument raised to [`LOG_FLOOR`]; raised entries
    /// are counted and receive no gradient.
    pub fn log(&mut self, x: Var) -> Var {
        let clamps = self.data(x).iter().filter(|&&v| !(v >= LOG_FLOOR)).count();
        self.log_clamps += clamps as u64;
        self.unary(Op::Log(x), x, |v| v.max(LOG_FLOOR).ln())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Op::Square(x), x, |v| v * v)
    }

    /// `ln(1 + e^x)` evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Op::Softplus(x), x, softplus)
    }

    /// Elementwise clamp to `[lo, hi]`; clamped entries get zero gradient.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp(x, lo, hi), x, |v| v.clamp(lo, hi))
    }

    /// Applies an elementwise primitive selected by name.
    pub fn apply(&mut self, primitive: &str, x: Var) -> Result<Var> {
        Ok(match primitive {
            "tanh" => self.tanh(x),
            "sigmoid" => self.sigmoid(x),
            "silu" | "swish" => self.silu(x),
            "relu" => self.relu(x),
            "exp" => self.exp(x),
            "log" => self.log(x),
            "square" => self.square(x),
            "softplus" => self.softplus(x),
            "identity" => x,
            other => return Err(AutodiffError::UnsupportedPrimitive(other.to_string())),
        })
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Row sums: `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let xs = self.data(x);
        let out = (0..m).map(|r| xs[r * n..(r + 1) * n].iter().sum()).collect();
        let rg = self.rg(x);
        self.push(Tensor::matrix(m, 1, out).expect("row sums"), Op::SumCols(x), rg)
    }

    /// Concatenates matrices with equal row counts along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::InvalidArgument(
                "concat_cols needs at least one input".into(),
            ));
        };
        let m = self.dims(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start + width` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + width > n || width == 0 {
            return Err(AutodiffError::InvalidArgument(format!(
                "slice {start}..{} out of range for {n} columns",
                start + width
            )));
        }
        let xs = self.data(x);
        let mut out = Vec::with_capacity(m * width);
        for r in 0..m {
            out.extend_from_slice(&xs[r * n + start..r * n + start + width]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(m, width, out)?, Op::SliceCols(x, start), rg))
    }

    /// Per-row normalisation to zero mean and unit variance, with `eps`
    /// added to the variance. No gain or bias.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let (m, n) = self.dims(x);
        let xs = self.data(x);
        let mut out = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|v| (v - mean) * is));
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::LayerNorm { x, inv_std },
            rg,
        )
    }

    /// Softmax over the feature axis of each row.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let xs = self.data(x);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|v| (v - mx).exp()));
            let z: f64 = out[start..].iter().sum();
            out[start..].iter_mut().for_each(|v| *v /= z);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Softmax(x), rg)
    }

    /// Elementwise `log N(x; mean, std^2)`, fused so that the gradient with
    /// respect to all three arguments is exact.
    pub fn gaussian_log_density(&mut self, x: Var, mean: Var, std: Var) -> Result<Var> {
        self.same_dims("gaussian_log_density", x, mean)?;
        self.same_dims("gaussian_log_density", x, std)?;
        let mut clamps = 0u64;
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .zip(self.data(mean))
            .zip(self.data(std))
            .map(|((&x, &m), &s)| {
                if !(s >= LOG_FLOOR) {
                    clamps += 1;
                }
                let s = s.max(LOG_FLOOR);
                let z = (x - m) / s;
                -0.5 * z * z - s.ln() - HALF_LN_2PI
            })
            .collect();
        self.log_clamps += clamps;
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(mean) || self.rg(std);
        Ok(self.push(Tensor::new(shape, data)?, Op::GaussianLogDensity { x, mean, std }, rg))
    }

    /// Affine map `x W + b` with `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// First node (in construction order, up to `upto` inclusive) holding a
    /// non-finite value.
    pub fn check_finite(&self, upto: Var) -> Result<()> {
        for (i, node) in self.nodes[..=upto.0].iter().enumerate() {
            if node.value.data().iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
        }
        Ok(())
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var, mode: BackwardMode) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(root_value.shape().to_vec()));
        }
        self.check_finite(root)?;

        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let leaf: Vec<bool> = self.nodes[..n].iter().map(|nd| matches!(nd.op, Op::Leaf)).collect();
        let lens: Vec<usize> = self.nodes[..n].iter().map(|nd| nd.value.len()).collect();
        grads[root.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            if leaf[i] || mode == BackwardMode::RetainIntermediates {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients {
            grads,
            leaf,
            lens,
            mode,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.rg(*a) {
                    let bv = self.data(*b);
                    // dA[m,k] += dC[m,n] * B^T
                    self.acc(grads, *a, |ga| gemm(m, n, k, g, (n, 1), bv, (1, n), ga, 1.0));
                }
                if self.rg(*b) {
                    let av = self.data(*a);
                    // dB[k,n] += A^T * dC
                    self.acc(grads, *b, |gb| gemm(k, m, n, av, (1, k), g, (n, 1), gb, 1.0));
                }
            }
            Op::Add(a, b) => {
                self.acc_zip(grads, *a, g, |_, gi| gi);
                self.acc_zip(grads, *b, g, |_, gi| gi);
            }
            Op::Sub(a, b) => {
                self.acc_zip(grads, *a, g, |_, gi| gi);
                self.acc_zip(grads, *b, g, |_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.acc_zip(grads, *a, g, |j, gi| gi * bv[j]);
                self.acc_zip(grads, *b, g, |j, gi| gi * av[j]);
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.acc_zip(grads, *a, g, |j, gi| if av[j] <= bv[j] { gi } else { 0.0 });
                self.acc_zip(grads, *b, g, |j, gi| if av[j] <= bv[j] { 0.0 } else { gi });
            }
            Op::AddRow(x, row) => {
                let n = self.dims(*x).1;
                self.acc_zip(grads, *x, g, |_, gi| gi);
                self.acc(grads, *row, |gr| {
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::MulRow(x, row) => {
                let n = self.dims(*x).1;
                let (xv, rv) = (self.data(*x), self.data(*row));
                self.acc_zip(grads, *x, g, |j, gi| gi * rv[j % n]);
                self.acc(grads, *row, |gr| {
                    for (gc, xc) in g.chunks(n).zip(xv.chunks(n)) {
                        for c in 0..n {
                            gr[c] += gc[c] * xc[c];
                        }
                    }
                });
            }
            Op::MulCol(x, col) => {
                let n = self.dims(*x).1;
                let (xv, cv) = (self.data(*x), self.data(*col));
                self.acc_zip(grads, *x, g, |j, gi| gi * cv[j / n]);
                self.acc(grads, *col, |gc| {
                    for (r, (gr, xr)) in g.chunks(n).zip(xv.chunks(n)).enumerate() {
                        gc[r] += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Scale(x, c) => self.acc_zip(grads, *x, g, |_, gi| c * gi),
            Op::AddScalar(x) => self.acc_zip(grads, *x, g, |_, gi| gi),
            Op::Tanh(x) => self.acc_zip(grads, *x, g, |j, gi| gi * (1.0 - y[j] * y[j])),
            Op::Sigmoid(x) => self.acc_zip(grads, *x, g, |j, gi| gi * y[j] * (1.0 - y[j])),
            Op::Silu(x) => {
                let xv = self.data(*x);
                self.acc_zip(grads, *x, g, |j, gi| {
                    let s = sigmoid(xv[j]);
                    gi * (s + xv[j] * s * (1.0 - s))
                });
            }
            Op::Relu(x) => {
                let xv = self.data(*x);
                self.acc_zip(grads, *x, g, |j, gi| if xv[j] > 0.0 { gi } else { 0.0 });
            }
            Op::Exp(x) => self.acc_zip(grads, *x, g, |j, gi| gi * y[j]),
            Op::Log(x) => {
                let xv = self.data(*x);
                self.acc_zip(grads, *x, g, |j, gi| if xv[j] >= LOG_FLOOR { gi / xv[j] } else { 0.0 });
            }
            Op::Square(x) => {
                let xv = self.data(*x);
                self.acc_zip(grads, *x, g, |j, gi| 2.0 * xv[j] * gi);
            }
            Op::Softplus(x) => {
                let xv = self.data(*x);
                self.acc_zip(grads, *x, g, |j, gi| gi * sigmoid(xv[j]));
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.data(*x);
                self.acc_zip(
                    grads,
                    *x,
                    g,
                    |j, gi| {
                        if xv[j] >= *lo && xv[j] <= *hi {
                            gi
                        } else {
                            0.0
                        }
                    },
                );
            }
            Op::Sum(x) => self.acc_zip(grads, *x, &[], |_, _| g[0]),
            Op::Mean(x) => {
                let scale = g[0] / self.nodes[x.0].value.len() as f64;
                self.acc_zip(grads, *x, &[], |_, _| scale);
            }
            Op::SumCols(x) => {
                let n = self.dims(*x).1;
                self.acc_zip(grads, *x, &[], |j, _| g[j / n]);
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if self.rg(p) {
                        self.acc(grads, p, |gp| {
                            for r in 0..m {
                                let src = &g[r * total + offset..r * total + offset + w];
                                gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                let (m, n) = self.dims(*x);
                let w = node.value.cols();
                self.acc(grads, *x, |gx| {
                    for r in 0..m {
                        let dst = &mut gx[r * n + start..r * n + start + w];
                        dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let n = node.value.cols();
                self.acc(grads, *x, |gx| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let sum_g: f64 = gr.iter().sum();
                        let sum_gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        let nf = n as f64;
                        for c in 0..n {
                            gx[r * n + c] += is / nf * (nf * gr[c] - sum_g - yr[c] * sum_gy);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let n = node.value.cols();
                self.acc(grads, *x, |gx| {
                    for (r, (gr, yr)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            gx[r * n + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::GaussianLogDensity { x, mean, std } => {
                let (xv, mv, sv) = (self.data(*x), self.data(*mean), self.data(*std));
                let dx = |j: usize| {
                    let s = sv[j].max(LOG_FLOOR);
                    (xv[j] - mv[j]) / (s * s)
                };
                self.acc_zip(grads, *x, g, |j, gi| -gi * dx(j));
                self.acc_zip(grads, *mean, g, |j, gi| gi * dx(j));
                self.acc_zip(grads, *std, g, |j, gi| {
                    if sv[j] < LOG_FLOOR {
                        return 0.0;
                    }
                    let s = sv[j];
                    let z = (xv[j] - mv[j]) / s;
                    gi * (z * z - 1.0) / s
                });
            }
        }
    }

    /// Accumulates into the gradient buffer of `v`, allocating it on first use.
    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }

    /// `grad[v][j] += f(j, g[j])`; when `g` is empty the second argument is 0.
    fn acc_zip(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        self.acc(grads, v, |buf| {
            if g.is_empty() {
                buf.iter_mut().enumerate().for_each(|(j, d)| *d += f(j, 0.0));
            } else {
                buf.iter_mut()
                    .zip(g)
                    .enumerate()
                    .for_each(|(j, (d, &gi))| *d += f(j, gi));
            }
        });
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log N(x; mean, std^2)` for one coordinate.
pub fn gaussian_log_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * z * z - std.ln() - 0.5 * (2.0 * PI).ln()
}

/// `c[m,n] = beta * c + a[m,k] * b[k,n]` with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: strides describe in-bounds row-major views of the given slices,
    // whose lengths are checked by the callers' shape validation.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_grad(f: impl Fn(&mut Graph, Var) -> Var, x0: f64) -> f64 {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(x0));
        let y = f(&mut g, x);
        let grads = g.backward(y, BackwardMode::ParamsOnly).unwrap();
        grads.wrt(x).unwrap()[0]
    }

    #[test]
    fn tanh_slope_at_zero_is_one() {
        assert_eq!(scalar_grad(|g, x| g.tanh(x), 0.0), 1.0);
    }

    #[test]
    fn log_sigmoid_slope_at_zero_is_half() {
        let d = scalar_grad(
            |g, x| {
                let s = g.sigmoid(x);
                g.log(s)
            },
            0.0,
        );
        assert!((d - 0.5).abs() < 1e-15);
    }

    #[test]
    fn matmul_gradients() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.variable(Tensor::matrix(3, 1, vec![1., -1., 2.]).unwrap());
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s, BackwardMode::ParamsOnly).unwrap();
        assert_eq!(grads.wrt(a).unwrap(), vec![1., -1., 2., 1., -1., 2.]);
        assert_eq!(grads.wrt(b).unwrap(), vec![5., 7., 9.]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            g.matmul(a, b),
            Err(AutodiffError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::zeros(&[2]));
        let t = g.tanh(a);
        assert!(matches!(
            g.backward(t, BackwardMode::ParamsOnly),
            Err(AutodiffError::NonScalarRoot(_))
        ));
    }

    #[test]
    fn nan_forward_names_first_node() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::scalar(1.0));
        let b = g.constant(Tensor::scalar(f64::NAN));
        let c = g.mul(a, b).unwrap();
        let d = g.tanh(c);
        match g.backward(d, BackwardMode::ParamsOnly) {
            Err(AutodiffError::NonFinite { node, op }) => {
                assert_eq!(node, 1);
                assert_eq!(op, "leaf");
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn unknown_primitive_rejected() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::scalar(1.0));
        assert!(matches!(g.apply("erf", a), Err(AutodiffError::UnsupportedPrimitive(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::scalar(3.0));
        let d = g.detach(a);
        let y = g.mul(a, d).unwrap();
        let grads = g.backward(y, BackwardMode::ParamsOnly).unwrap();
        assert_eq!(grads.wrt(a).unwrap(), vec![3.0]);
    }

    #[test]
    fn intermediates_dropped_unless_retained() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::scalar(0.3));
        let h = g.tanh(a);
        let y = g.square(h);
        let grads = g.backward(y, BackwardMode::ParamsOnly).unwrap();
        assert!(matches!(grads.wrt(h), Err(AutodiffError::IntermediateNotRetained(_))));
        let grads = g.backward(y, BackwardMode::RetainIntermediates).unwrap();
        let t = 0.3f64.tanh();
        assert!((grads.wrt(h).unwrap()[0] - 2.0 * t).abs() < 1e-15);
    }

    #[test]
    fn log_guard_counts_and_stays_finite() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::vector(vec![0.0, 1.0]));
        let l = g.log(a);
        assert_eq!(g.log_clamp_events(), 1);
        assert!(g.value(l).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![3.0; 5]));
        let y = g.layer_norm(a, 1e-5);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
