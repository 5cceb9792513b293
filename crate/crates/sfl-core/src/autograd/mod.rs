//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitive applications during the forward pass; one
//! backward traversal then accumulates gradients into every `requires_grad`
//! leaf reachable from the loss. The primitive set is exactly what a
//! two-layer polynomial graph filter needs: elementwise arithmetic (which
//! doubles as scalar arithmetic for the recurrence-coefficient rationals),
//! matmul, a fixed-operator spmm, relu, dropout, layer norm, log-softmax
//! and a masked NLL loss.
//!
//! Tapes are single-threaded and rebuilt every training step; scalar shape
//! parameters enter as rank-0 leaves so their gradients flow through every
//! recurrence step.

mod adam;

pub use adam::{adam_step, AdamHyper, AdamState};

use crate::graph::{spmm_into, CsrMatrix};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("backward target must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("nll_loss mask selects no rows")]
    EmptyMask,
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidDropoutRate(f64),
    #[error("label {label} out of range for {classes} classes at row {row}")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("non-finite gradient at component {index}")]
    NonFiniteGradient { index: usize },
}

/// Dense row-major tensor. Rank 0 (empty shape, one element) is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length disagree"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Scalar payload; panics on non-scalars.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    ScalarMul {
        scalar: Var,
        tensor: Var,
    },
    Matmul(Var, Var),
    Spmm {
        operator: Arc<CsrMatrix>,
        x: Var,
    },
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LogSoftmax(Var),
    NllLoss {
        log_probs: Var,
        labels: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    Sum(Var),
    Sigmoid(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation and plays it backwards for gradients.
///
/// The tape owns the dropout RNG so a run's noise stream is reproducible
/// from the seed alone.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    rng: ChaCha8Rng,
}

type Result<T> = std::result::Result<T, AutogradError>;

impl Tape {
    pub fn new(dropout_seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass; `None` before backward or for
    /// values that do not require gradients.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Non-differentiable scalar constant.
    pub fn constant(&mut self, v: f64) -> Var {
        self.push(Tensor::scalar(v), Op::Leaf, false)
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AutogradError::ShapeMismatch {
                op,
                details: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product; on rank-0 inputs this is plain scalar product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("div", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x / y);
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(value, Op::Div(a, b), rg))
    }

    /// Multiplication by a plain constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = map(self.value(a), |x| x * c);
        let rg = self.needs_grad(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Addition of a plain constant.
    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = map(self.value(a), |x| x + c);
        let rg = self.needs_grad(a);
        self.push(value, Op::AddConst(a), rg)
    }

    /// Broadcasts a rank-0 scalar over a tensor.
    pub fn scalar_mul(&mut self, scalar: Var, tensor: Var) -> Result<Var> {
        if !self.value(scalar).is_scalar() {
            return Err(AutogradError::ShapeMismatch {
                op: "scalar_mul",
                details: format!("first operand has shape {:?}", self.value(scalar).shape()),
            });
        }
        let s = self.value(scalar).item();
        let value = map(self.value(tensor), |x| x * s);
        let rg = self.needs_grad(scalar) || self.needs_grad(tensor);
        Ok(self.push(value, Op::ScalarMul { scalar, tensor }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutogradError::ShapeMismatch {
                op: "matmul",
                details: format!("{sa:?} x {sb:?}"),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            n,
            k,
            m,
            &mut out,
        );
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Tensor::matrix(n, m, out), Op::Matmul(a, b), rg))
    }

    /// Product with a fixed sparse operator. The operator must be symmetric
    /// (domain-mapped Laplacians are), which the backward rule relies on.
    pub fn spmm(&mut self, operator: &Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let sx = self.value(x).shape();
        if sx.len() != 2 || sx[0] != operator.n_cols() {
            return Err(AutogradError::ShapeMismatch {
                op: "spmm",
                details: format!(
                    "operator is {}x{}, block has shape {sx:?}",
                    operator.n_rows(),
                    operator.n_cols()
                ),
            });
        }
        let f = sx[1];
        let mut out = vec![0.0; operator.n_rows() * f];
        spmm_into(operator, self.value(x).data(), f, &mut out);
        let rg = self.needs_grad(x);
        Ok(self.push(
            Tensor::matrix(operator.n_rows(), f, out),
            Op::Spmm {
                operator: Arc::clone(operator),
                x,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = map(self.value(x), |v| v.max(0.0));
        let rg = self.needs_grad(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Inverted dropout: keeps each entry with probability `1 - rate` and
    /// rescales by `1/(1 - rate)`. In eval mode (or at rate 0) it is the
    /// identity and draws nothing from the RNG.
    pub fn dropout(&mut self, x: Var, rate: f64, train_mode: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutogradError::InvalidDropoutRate(rate));
        }
        if !train_mode || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| {
                if self.rng.random::<f64>() >= rate {
                    keep_scale
                } else {
                    0.0
                }
            })
            .collect();
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x)
                .data()
                .iter()
                .zip(&mask)
                .map(|(v, m)| v * m)
                .collect(),
        );
        let rg = self.needs_grad(x);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    /// Per-row layer normalization over the feature axis with affine
    /// parameters: `y = gain * (x - mean) / sqrt(var + eps) + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 2 {
            return Err(AutogradError::ShapeMismatch {
                op: "layer_norm",
                details: format!("input must be rank 2, got {sx:?}"),
            });
        }
        let (n, f) = (sx[0], sx[1]);
        for (name, v) in [("gain", gain), ("bias", bias)] {
            let s = self.value(v).shape();
            if s != [f] {
                return Err(AutogradError::ShapeMismatch {
                    op: "layer_norm",
                    details: format!("{name} must have shape [{f}], got {s:?}"),
                });
            }
        }
        let xd = self.value(x).data();
        let mut x_hat = vec![0.0; n * f];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = &xd[i * f..(i + 1) * f];
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..f {
                x_hat[i * f + j] = (row[j] - mean) * is;
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; n * f];
        for i in 0..n {
            for j in 0..f {
                out[i * f + j] = g[j] * x_hat[i * f + j] + b[j];
            }
        }
        let rg = self.needs_grad(x) || self.needs_grad(gain) || self.needs_grad(bias);
        Ok(self.push(
            Tensor::matrix(n, f, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                x_hat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 2 {
            return Err(AutogradError::ShapeMismatch {
                op: "log_softmax",
                details: format!("input must be rank 2, got {sx:?}"),
            });
        }
        let (n, c) = (sx[0], sx[1]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &xd[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let rg = self.needs_grad(x);
        Ok(self.push(Tensor::matrix(n, c, out), Op::LogSoftmax(x), rg))
    }

    /// Mean negative log-likelihood over masked rows.
    pub fn nll_loss(&mut self, log_probs: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        let s = self.value(log_probs).shape().to_vec();
        if s.len() != 2 || labels.len() != s[0] || mask.len() != s[0] {
            return Err(AutogradError::ShapeMismatch {
                op: "nll_loss",
                details: format!(
                    "log_probs {s:?}, {} labels, {} mask entries",
                    labels.len(),
                    mask.len()
                ),
            });
        }
        let (_, c) = (s[0], s[1]);
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(AutogradError::EmptyMask);
        }
        let lp = self.value(log_probs).data();
        let mut total = 0.0;
        for (i, (&label, &m)) in labels.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if label >= c {
                return Err(AutogradError::LabelOutOfRange {
                    row: i,
                    label,
                    classes: c,
                });
            }
            total -= lp[i * c + label];
        }
        let rg = self.needs_grad(log_probs);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::NllLoss {
                log_probs,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.needs_grad(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = map(self.value(x), sigmoid);
        let rg = self.needs_grad(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Runs one reverse pass from a scalar loss, filling gradients of every
    /// `requires_grad` value reachable from it. Prior gradients on this tape
    /// are discarded; accumulation across steps is the caller's business.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(AutogradError::NonScalarLoss(
                self.value(loss).shape().to_vec(),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.ensure_grad(loss);
        self.grads[loss.0].as_mut().unwrap()[0] = 1.0;

        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let upstream = self.grads[id].take().unwrap();
            self.apply_backward(id, &upstream);
            self.grads[id] = Some(upstream);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, v: Var) {
        if self.grads[v.0].is_none() {
            self.grads[v.0] = Some(vec![0.0; self.nodes[v.0].value.len()]);
        }
    }

    fn add_into(&mut self, v: Var, contribution: impl Iterator<Item = f64>) {
        if !self.needs_grad(v) {
            return;
        }
        self.ensure_grad(v);
        let g = self.grads[v.0].as_mut().unwrap();
        for (slot, c) in g.iter_mut().zip(contribution) {
            *slot += c;
        }
    }

    fn apply_backward(&mut self, id: usize, dz: &[f64]) {
        // Ops whose rules need values are read before mutating grads.
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.add_into(a, dz.iter().cloned());
                self.add_into(b, dz.iter().cloned());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.add_into(a, dz.iter().cloned());
                self.add_into(b, dz.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = dz
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(d, y)| d * y)
                    .collect();
                let db: Vec<f64> = dz
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(d, x)| d * x)
                    .collect();
                self.add_into(a, da.into_iter());
                self.add_into(b, db.into_iter());
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = dz
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(d, y)| d / y)
                    .collect();
                let db: Vec<f64> = dz
                    .iter()
                    .zip(self.value(a).data().iter().zip(self.value(b).data()))
                    .map(|(d, (x, y))| -d * x / (y * y))
                    .collect();
                self.add_into(a, da.into_iter());
                self.add_into(b, db.into_iter());
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.add_into(a, dz.iter().map(move |d| d * c));
            }
            Op::AddConst(a) => {
                let a = *a;
                self.add_into(a, dz.iter().cloned());
            }
            Op::ScalarMul { scalar, tensor } => {
                let (scalar, tensor) = (*scalar, *tensor);
                let s = self.value(scalar).item();
                let ds: f64 = dz
                    .iter()
                    .zip(self.value(tensor).data())
                    .map(|(d, t)| d * t)
                    .sum();
                self.add_into(scalar, std::iter::once(ds));
                self.add_into(tensor, dz.iter().map(move |d| d * s));
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (n, k) = {
                    let s = self.value(a).shape();
                    (s[0], s[1])
                };
                let m = self.value(b).shape()[1];
                // dA = dZ * B^T
                let bt = transpose(self.value(b).data(), k, m);
                let mut da = vec![0.0; n * k];
                matmul_into(dz, &bt, n, m, k, &mut da);
                // dB = A^T * dZ
                let at = transpose(self.value(a).data(), n, k);
                let mut db = vec![0.0; k * m];
                matmul_into(&at, dz, k, n, m, &mut db);
                self.add_into(a, da.into_iter());
                self.add_into(b, db.into_iter());
            }
            Op::Spmm { operator, x } => {
                let x = *x;
                let op = Arc::clone(operator);
                let f = self.value(x).shape()[1];
                let mut dx = vec![0.0; op.n_cols() * f];
                // Symmetric operator: A^T dZ = A dZ.
                spmm_into(&op, dz, f, &mut dx);
                self.add_into(x, dx.into_iter());
            }
            Op::Relu(a) => {
                let a = *a;
                let da: Vec<f64> = dz
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                    .collect();
                self.add_into(a, da.into_iter());
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let da: Vec<f64> = dz.iter().zip(mask).map(|(d, m)| d * m).collect();
                self.add_into(x, da.into_iter());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                x_hat,
                inv_std,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let (n, f) = {
                    let s = self.value(x).shape();
                    (s[0], s[1])
                };
                let g = self.value(gain).data().to_vec();
                let x_hat = x_hat.clone();
                let inv_std = inv_std.clone();

                let mut dgain = vec![0.0; f];
                let mut dbias = vec![0.0; f];
                for i in 0..n {
                    for j in 0..f {
                        dgain[j] += dz[i * f + j] * x_hat[i * f + j];
                        dbias[j] += dz[i * f + j];
                    }
                }
                let mut dx = vec![0.0; n * f];
                for i in 0..n {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..f {
                        let dxh = dz[i * f + j] * g[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * x_hat[i * f + j];
                    }
                    mean_dxhat /= f as f64;
                    mean_dxhat_xhat /= f as f64;
                    for j in 0..f {
                        let dxh = dz[i * f + j] * g[j];
                        dx[i * f + j] =
                            inv_std[i] * (dxh - mean_dxhat - x_hat[i * f + j] * mean_dxhat_xhat);
                    }
                }
                self.add_into(x, dx.into_iter());
                self.add_into(gain, dgain.into_iter());
                self.add_into(bias, dbias.into_iter());
            }
            Op::LogSoftmax(a) => {
                let a = *a;
                let (n, c) = {
                    let s = self.value(a).shape();
                    (s[0], s[1])
                };
                let y = self.nodes[id].value.data().to_vec();
                let mut da = vec![0.0; n * c];
                for i in 0..n {
                    let row_sum: f64 = dz[i * c..(i + 1) * c].iter().sum();
                    for j in 0..c {
                        da[i * c + j] = dz[i * c + j] - y[i * c + j].exp() * row_sum;
                    }
                }
                self.add_into(a, da.into_iter());
            }
            Op::NllLoss {
                log_probs,
                labels,
                mask,
                count,
            } => {
                let log_probs = *log_probs;
                let c = self.value(log_probs).shape()[1];
                let scale = dz[0] / *count as f64;
                let mut da = vec![0.0; self.value(log_probs).len()];
                for (i, (&label, &m)) in labels.iter().zip(mask.iter()).enumerate() {
                    if m {
                        da[i * c + label] = -scale;
                    }
                }
                self.add_into(log_probs, da.into_iter());
            }
            Op::Sum(a) => {
                let a = *a;
                let d = dz[0];
                let len = self.value(a).len();
                self.add_into(a, std::iter::repeat(d).take(len));
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = self.nodes[id].value.data().to_vec();
                let da: Vec<f64> = dz.iter().zip(&y).map(|(d, s)| d * s * (1.0 - s)).collect();
                self.add_into(a, da.into_iter());
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn matmul_into(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let row_out = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let row_b = &b[p * m..(p + 1) * m];
            for (o, &bv) in row_out.iter_mut().zip(row_b) {
                *o += aip * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::csr_from_edge_list;
    use crate::oracles::rel_err;

    #[test]
    fn relu_forward_backward() {
        let mut t = Tape::new(0);
        let x = t.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]), true);
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut t = Tape::new(0);
        let x = t.leaf(Tensor::matrix(1, 3, vec![3.0, 3.0, 3.0]), false);
        let g = t.leaf(Tensor::new(vec![3], vec![1.0; 3]), false);
        let b = t.leaf(Tensor::new(vec![3], vec![0.0; 3]), false);
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        for v in t.value(y).data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new(0);
        let x = t.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]), true);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_scalar_product() {
        let mut t = Tape::new(0);
        let x = t.leaf(Tensor::scalar(3.0), true);
        let y = t.leaf(Tensor::scalar(-2.0), true);
        let z = t.mul(x, y).unwrap();
        t.backward(z).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[-2.0]);
        assert_eq!(t.grad(y).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new(0);
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]), true);
        assert!(matches!(
            t.backward(x),
            Err(AutogradError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn nll_rejects_empty_mask() {
        let mut t = Tape::new(0);
        let x = t.leaf(Tensor::matrix(2, 2, vec![0.0; 4]), true);
        let lp = t.log_softmax(x).unwrap();
        assert!(matches!(
            t.nll_loss(lp, &[0, 1], &[false, false]),
            Err(AutogradError::EmptyMask)
        ));
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut t = Tape::new(0);
        let x = t.leaf(Tensor::matrix(2, 3, vec![1.0, -0.5, 2.0, 10.0, 10.0, 10.0]), false);
        let lp = t.log_softmax(x).unwrap();
        for i in 0..2 {
            let s: f64 = t.value(lp).data()[i * 3..(i + 1) * 3]
                .iter()
                .map(|v| v.exp())
                .sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut t = Tape::new(7);
        let x = t.leaf(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]), false);
        let y = t.dropout(x, 0.0, true).unwrap();
        assert_eq!(x, y);
        let z = t.dropout(x, 0.5, false).unwrap();
        assert_eq!(x, z);
        assert!(matches!(
            t.dropout(x, 1.0, true),
            Err(AutogradError::InvalidDropoutRate(_))
        ));
    }

    #[test]
    fn dropout_is_seed_deterministic() {
        let run = |seed: u64| {
            let mut t = Tape::new(seed);
            let x = t.leaf(Tensor::new(vec![64], vec![1.0; 64]), false);
            let y = t.dropout(x, 0.5, true).unwrap();
            t.value(y).data().to_vec()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    /// Central finite differences on every primitive.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let failures = crate::check::gradcheck_primitives();
        assert!(failures.is_empty(), "{failures:?}");
    }

    #[test]
    fn matmul_gradient_spot_check() {
        // d/dA sum(A B) where the loss routes through relu keeps the check
        // nontrivial; compare one entry against central differences.
        let a0 = vec![0.3, -0.7, 1.2, 0.5, -0.1, 0.9, 0.2, -1.3, 0.4, 1.1, -0.6, 0.8];
        let b0 = vec![0.5, -0.2, 0.7, 1.3, -0.9, 0.1, 0.6, -0.4];
        let loss_of = |a: &[f64]| {
            let mut t = Tape::new(0);
            let av = t.leaf(Tensor::matrix(3, 4, a.to_vec()), false);
            let bv = t.leaf(Tensor::matrix(4, 2, b0.clone()), false);
            let z = t.matmul(av, bv).unwrap();
            let r = t.relu(z);
            let s = t.sum(r);
            t.value(s).item()
        };
        let mut t = Tape::new(0);
        let av = t.leaf(Tensor::matrix(3, 4, a0.clone()), true);
        let bv = t.leaf(Tensor::matrix(4, 2, b0.clone()), false);
        let z = t.matmul(av, bv).unwrap();
        let r = t.relu(z);
        let s = t.sum(r);
        t.backward(s).unwrap();
        let grad = t.grad(av).unwrap().to_vec();
        let h = 1e-5;
        for idx in 0..a0.len() {
            let mut plus = a0.clone();
            plus[idx] += h;
            let mut minus = a0.clone();
            minus[idx] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            assert!(
                rel_err(grad[idx], fd, 1e-6) < 1e-6,
                "entry {idx}: ad {} vs fd {fd}",
                grad[idx]
            );
        }
    }

    #[test]
    fn spmm_backward_uses_symmetric_operator() {
        let a = csr_from_edge_list(&[(0, 1), (1, 2)], 3, false).unwrap();
        let op = Arc::new(crate::graph::sym_normalized_laplacian(&a).unwrap());
        let x0 = vec![0.4, -0.2, 0.9, 0.1, -0.5, 0.3];
        let loss_of = |x: &[f64]| {
            let mut t = Tape::new(0);
            let xv = t.leaf(Tensor::matrix(3, 2, x.to_vec()), false);
            let y = t.spmm(&op, xv).unwrap();
            let r = t.mul(y, y).unwrap();
            let s = t.sum(r);
            t.value(s).item()
        };
        let mut t = Tape::new(0);
        let xv = t.leaf(Tensor::matrix(3, 2, x0.clone()), true);
        let y = t.spmm(&op, xv).unwrap();
        let r = t.mul(y, y).unwrap();
        let s = t.sum(r);
        t.backward(s).unwrap();
        let grad = t.grad(xv).unwrap().to_vec();
        let h = 1e-6;
        for idx in 0..x0.len() {
            let mut plus = x0.clone();
            plus[idx] += h;
            let mut minus = x0.clone();
            minus[idx] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            assert!(rel_err(grad[idx], fd, 1e-6) < 1e-5);
        }
    }
}
