//! Dense f64 kernels and differentiable layer primitives.
//!
//! Every reduction runs in ascending index order so identical inputs give
//! bit-identical outputs across runs. Backward passes are hand-derived and
//! checked against central finite differences by [`grad_check`].

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("degenerate batch: train-mode batchnorm needs at least 2 rows, got {0}")]
    DegenerateBatch(usize),
    #[error("batchnorm backward requires a train-mode cache")]
    CacheMode,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("gradient check aborted: non-finite loss at parameter {index} ({name})")]
    GradCheckNonFinite { index: usize, name: String },
}

pub type Result<T> = std::result::Result<T, KernelError>;

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix[{}x{}]", self.rows, self.cols)?;
        f.debug_list()
            .entries(self.data.chunks(self.cols.max(1)))
            .finish()
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(KernelError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(KernelError::NonFinite("matrix data"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(KernelError::Shape {
                    op: "from_rows",
                    left: format!("row length {cols}"),
                    right: format!("row length {}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// Builds a matrix by evaluating `f(row, col)` for every entry.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(KernelError::NonFinite(what))
        }
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    /// Largest absolute entry, or 0 for an empty matrix.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> KernelError {
    KernelError::Shape {
        op,
        left: a.shape_str(),
        right: b.shape_str(),
    }
}

/// `c[i][j] = sum_p a[i][p] * b[p][j]`, accumulated with `p` ascending.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape_err("matmul", a, b));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Matrix {
        rows: m,
        cols: n,
        data: out,
    })
}

/// `y = x * w + bias`, bias broadcast over rows.
pub fn linear_forward(x: &Matrix, w: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if bias.len() != w.cols {
        return Err(KernelError::Shape {
            op: "linear_forward bias",
            left: w.shape_str(),
            right: format!("bias[{}]", bias.len()),
        });
    }
    let mut y = matmul(x, w).map_err(|_| shape_err("linear_forward", x, w))?;
    for r in 0..y.rows {
        for (v, b) in y.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub grad_x: Matrix,
    pub grad_w: Matrix,
    pub grad_bias: Vec<f64>,
}

pub fn linear_backward(x: &Matrix, w: &Matrix, grad_y: &Matrix) -> Result<LinearGrads> {
    if x.cols != w.rows {
        return Err(shape_err("linear_backward", x, w));
    }
    if grad_y.rows != x.rows || grad_y.cols != w.cols {
        return Err(shape_err("linear_backward grad_y", grad_y, w));
    }
    let grad_x = matmul(grad_y, &w.transpose())?;
    let grad_w = matmul(&x.transpose(), grad_y)?;
    Ok(LinearGrads {
        grad_x,
        grad_w,
        grad_bias: column_sums(grad_y),
    })
}

pub fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols];
    for r in 0..m.rows {
        for (acc, v) in s.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    s
}

pub fn relu_forward(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    for v in &mut y.data {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// Passes gradient where `x > 0`; the subgradient at exactly 0 is 0.
pub fn relu_backward(x: &Matrix, grad_y: &Matrix) -> Result<Matrix> {
    if x.shape() != grad_y.shape() {
        return Err(shape_err("relu_backward", x, grad_y));
    }
    let data = x
        .data
        .iter()
        .zip(&grad_y.data)
        .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Matrix {
        rows: x.rows,
        cols: x.cols,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// Affine parameters and running statistics of a batch-normalization layer.
///
/// Running variance is the biased (divisor `B`) batch variance, blended as
/// `running <- (1 - bn_momentum) * running + bn_momentum * batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub bn_momentum: f64,
}

impl BatchNormState {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            eps: DEFAULT_BN_EPS,
            bn_momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_consistent(&self) -> bool {
        let d = self.gamma.len();
        self.beta.len() == d
            && self.running_mean.len() == d
            && self.running_var.len() == d
            && self.running_var.iter().all(|&v| v >= 0.0)
    }
}

/// Saved intermediates of a batchnorm forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchNormCache {
    Train {
        x_hat: Matrix,
        inv_std: Vec<f64>,
        gamma: Vec<f64>,
    },
    Eval,
}

pub fn batchnorm_forward(
    x: &Matrix,
    st: &mut BatchNormState,
    mode: Mode,
) -> Result<(Matrix, BatchNormCache)> {
    let (b, q) = x.shape();
    if st.dim() != q {
        return Err(KernelError::Shape {
            op: "batchnorm_forward",
            left: x.shape_str(),
            right: format!("bn[{}]", st.dim()),
        });
    }
    match mode {
        Mode::Eval => Ok((batchnorm_eval(x, st)?, BatchNormCache::Eval)),
        Mode::Train => {
            if b < 2 {
                return Err(KernelError::DegenerateBatch(b));
            }
            let n = b as f64;
            let mean: Vec<f64> = column_sums(x).into_iter().map(|s| s / n).collect();
            let mut var = vec![0.0; q];
            for i in 0..b {
                for (j, v) in var.iter_mut().enumerate() {
                    let d = x.get(i, j) - mean[j];
                    *v += d * d;
                }
            }
            for v in &mut var {
                *v /= n;
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + st.eps).sqrt()).collect();
            let x_hat = Matrix::from_fn(b, q, |i, j| (x.get(i, j) - mean[j]) * inv_std[j]);
            let y = Matrix::from_fn(b, q, |i, j| st.gamma[j] * x_hat.get(i, j) + st.beta[j]);
            let mom = st.bn_momentum;
            for j in 0..q {
                st.running_mean[j] = (1.0 - mom) * st.running_mean[j] + mom * mean[j];
                st.running_var[j] = (1.0 - mom) * st.running_var[j] + mom * var[j];
            }
            Ok((
                y,
                BatchNormCache::Train {
                    x_hat,
                    inv_std,
                    gamma: st.gamma.clone(),
                },
            ))
        }
    }
}

/// Eval-mode normalization by running statistics; never mutates `st`.
pub fn batchnorm_eval(x: &Matrix, st: &BatchNormState) -> Result<Matrix> {
    if st.dim() != x.cols() {
        return Err(KernelError::Shape {
            op: "batchnorm_eval",
            left: x.shape_str(),
            right: format!("bn[{}]", st.dim()),
        });
    }
    let inv: Vec<f64> = st
        .running_var
        .iter()
        .map(|v| 1.0 / (v + st.eps).sqrt())
        .collect();
    Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        st.gamma[j] * (x.get(i, j) - st.running_mean[j]) * inv[j] + st.beta[j]
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads {
    pub grad_x: Matrix,
    pub grad_gamma: Vec<f64>,
    pub grad_beta: Vec<f64>,
}

pub fn batchnorm_backward(cache: &BatchNormCache, grad_y: &Matrix) -> Result<BatchNormGrads> {
    let BatchNormCache::Train {
        x_hat,
        inv_std,
        gamma,
    } = cache
    else {
        return Err(KernelError::CacheMode);
    };
    if x_hat.shape() != grad_y.shape() {
        return Err(shape_err("batchnorm_backward", x_hat, grad_y));
    }
    let (b, q) = x_hat.shape();
    let n = b as f64;
    let grad_beta = column_sums(grad_y);
    let mut grad_gamma = vec![0.0; q];
    for i in 0..b {
        for (j, g) in grad_gamma.iter_mut().enumerate() {
            *g += grad_y.get(i, j) * x_hat.get(i, j);
        }
    }
    // dx = inv_std / B * (B * dxh - sum(dxh) - x_hat * sum(dxh * x_hat)), dxh = gamma * dy
    let grad_x = Matrix::from_fn(b, q, |i, j| {
        let dxh = gamma[j] * grad_y.get(i, j);
        inv_std[j] / n * (n * dxh - gamma[j] * grad_beta[j] - x_hat.get(i, j) * gamma[j] * grad_gamma[j])
    });
    Ok(BatchNormGrads {
        grad_x,
        grad_gamma,
        grad_beta,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(name, rel_error)` for every checked scalar, in parameter order.
    pub per_parameter_errors: Vec<(String, f64)>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Name and error of the worst-agreeing parameter.
    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_parameter_errors
            .iter()
            .fold(None, |best: Option<(&str, f64)>, (n, e)| match best {
                Some((_, be)) if be >= *e => best,
                _ => Some((n.as_str(), *e)),
            })
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

pub fn fd_step(p: f64) -> f64 {
    1e-5 * p.abs().max(1.0)
}

/// Compares `analytic` against central finite differences of `eval_fn` at `params`.
///
/// The step for parameter `p` is `1e-5 * max(1, |p|)`.
pub fn grad_check<F>(
    mut eval_fn: F,
    params: &[f64],
    analytic: &[f64],
    names: &[String],
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() || params.len() != names.len() {
        return Err(KernelError::Shape {
            op: "grad_check",
            left: format!("params[{}]", params.len()),
            right: format!("analytic[{}] names[{}]", analytic.len(), names.len()),
        });
    }
    let mut p = params.to_vec();
    let base = eval_fn(&p);
    if !base.is_finite() {
        return Err(KernelError::NonFinite("grad_check base loss"));
    }
    let mut errors = Vec::with_capacity(p.len());
    let mut max_rel = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        let h = fd_step(orig);
        p[i] = orig + h;
        let fp = eval_fn(&p);
        p[i] = orig - h;
        let fm = eval_fn(&p);
        p[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(KernelError::GradCheckNonFinite {
                index: i,
                name: names[i].clone(),
            });
        }
        let numeric = (fp - fm) / (2.0 * h);
        let e = relative_error(analytic[i], numeric);
        max_rel = max_rel.max(e);
        errors.push((names[i].clone(), e));
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        per_parameter_errors: errors,
        tolerance: tol,
        passed: max_rel < tol,
    })
}
