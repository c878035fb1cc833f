//! Dense row-major tensors of `f64` with the small linear-algebra kernel
//! (matmul, Hadamard, mode-n products, unfoldings, singular values) that
//! every other module builds on.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank-{expected} tensor, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("mode {mode} out of range for tensor of rank {rank}")]
    ModeOutOfRange { mode: usize, rank: usize },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("{op}: dimension sizes must be positive, got {shape:?}")]
    EmptyDimension { op: &'static str, shape: Vec<usize> },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

/// Dense n-dimensional array of 64-bit reals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::EmptyDimension { op: "new", shape });
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![1.0; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let len: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f(&idx));
            for axis in (0..shape.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        Tensor::from_fn(&[n, n], |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Number of axes (tensor order), not the linear-algebra rank.
    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    #[inline]
    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.ndim(), 2);
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.ndim(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn expect_rank(&self, expected: usize, op: &'static str) -> Result<(), TensorError> {
        if self.ndim() != expected {
            return Err(TensorError::RankMismatch {
                op,
                expected,
                shape: self.shape.clone(),
            });
        }
        Ok(())
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.expect_rank(2, "matmul")?;
        rhs.expect_rank(2, "matmul")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        // ikj order keeps the inner loop contiguous on both operands.
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &rhs.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] += a * row[j];
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        self.expect_rank(2, "transpose")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Element-wise product; shapes must match exactly (no broadcasting).
    pub fn hadamard(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape != rhs.shape {
            return Err(TensorError::ShapeMismatch {
                op: "hadamard",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape != rhs.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape != rhs.shape {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.map(|x| x + s)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Mode-`mode` unfolding: a `k_mode x prod(k_j, j != mode)` matrix whose
    /// columns enumerate the remaining axes in row-major order.
    pub fn unfold(&self, mode: usize) -> Result<Tensor, TensorError> {
        if mode >= self.ndim() {
            return Err(TensorError::ModeOutOfRange {
                mode,
                rank: self.ndim(),
            });
        }
        let rows = self.shape[mode];
        let cols = self.len() / rows;
        let mut out = vec![0.0; self.len()];
        let mut idx = vec![0usize; self.ndim()];
        for &v in &self.data {
            let r = idx[mode];
            let mut c = 0usize;
            for (axis, &i) in idx.iter().enumerate() {
                if axis != mode {
                    c = c * self.shape[axis] + i;
                }
            }
            out[r * cols + c] = v;
            increment(&mut idx, &self.shape);
        }
        Tensor::new(vec![rows, cols], out)
    }

    /// Inverse of [`Tensor::unfold`]: refolds a matrix back into `shape`.
    pub fn fold(mat: &Tensor, mode: usize, shape: &[usize]) -> Result<Tensor, TensorError> {
        mat.expect_rank(2, "fold")?;
        if mode >= shape.len() {
            return Err(TensorError::ModeOutOfRange {
                mode,
                rank: shape.len(),
            });
        }
        let len: usize = shape.iter().product();
        let rows = shape[mode];
        let cols = len / rows;
        if mat.shape[0] != rows || mat.shape[1] != cols {
            return Err(TensorError::ShapeMismatch {
                op: "fold",
                lhs: mat.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let mut out = vec![0.0; len];
        let mut idx = vec![0usize; shape.len()];
        for slot in out.iter_mut() {
            let r = idx[mode];
            let mut c = 0usize;
            for (axis, &i) in idx.iter().enumerate() {
                if axis != mode {
                    c = c * shape[axis] + i;
                }
            }
            *slot = mat.data[r * cols + c];
            increment(&mut idx, shape);
        }
        Tensor::new(shape.to_vec(), out)
    }

    /// Mode-n tensor product: contracts `m` (p x k_mode) against axis `mode`,
    /// replacing that axis with size p. Satisfies
    /// `result.unfold(mode) == m.matmul(&t.unfold(mode))`.
    pub fn mode_n_product(&self, m: &Tensor, mode: usize) -> Result<Tensor, TensorError> {
        m.expect_rank(2, "mode_n_product")?;
        if mode >= self.ndim() {
            return Err(TensorError::ModeOutOfRange {
                mode,
                rank: self.ndim(),
            });
        }
        if m.shape[1] != self.shape[mode] {
            return Err(TensorError::ShapeMismatch {
                op: "mode_n_product",
                lhs: m.shape.clone(),
                rhs: self.shape.clone(),
            });
        }
        let unfolded = self.unfold(mode)?;
        let product = m.matmul(&unfolded)?;
        let mut new_shape = self.shape.clone();
        new_shape[mode] = m.shape[0];
        Tensor::fold(&product, mode, &new_shape)
    }

    /// Singular values of a rank-2 tensor, descending, via one-sided Jacobi.
    pub fn singular_values(&self) -> Result<Vec<f64>, TensorError> {
        self.expect_rank(2, "singular_values")?;
        // Work on A or A^T so that columns are the short side.
        let (m, n) = (self.shape[0], self.shape[1]);
        let work = if m >= n {
            self.clone()
        } else {
            self.transpose()?
        };
        let rows = work.shape[0];
        let cols = work.shape[1];
        // Column-major copy: cols of length `rows`.
        let mut a: Vec<Vec<f64>> = (0..cols)
            .map(|j| (0..rows).map(|i| work.data[i * cols + j]).collect())
            .collect();

        let eps = f64::EPSILON;
        let max_sweeps = 60;
        for _ in 0..max_sweeps {
            let mut rotated = false;
            for p in 0..cols {
                for q in (p + 1)..cols {
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for i in 0..rows {
                        alpha += a[p][i] * a[p][i];
                        beta += a[q][i] * a[q][i];
                        gamma += a[p][i] * a[q][i];
                    }
                    if alpha == 0.0 || beta == 0.0 {
                        continue;
                    }
                    if gamma.abs() <= eps * (alpha * beta).sqrt() {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..rows {
                        let vp = a[p][i];
                        let vq = a[q][i];
                        a[p][i] = c * vp - s * vq;
                        a[q][i] = s * vp + c * vq;
                    }
                }
            }
            if !rotated {
                break;
            }
        }

        let mut sigma: Vec<f64> = a
            .iter()
            .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        sigma.sort_by(|x, y| y.partial_cmp(x).unwrap());
        if sigma.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite {
                op: "singular_values",
            });
        }
        Ok(sigma)
    }

    /// Count of singular values above `tol`; the default tolerance is
    /// `max(m, n) * sigma_max * machine_epsilon`.
    pub fn numerical_rank(&self, tol: Option<f64>) -> Result<usize, TensorError> {
        self.expect_rank(2, "numerical_rank")?;
        let sigma = self.singular_values()?;
        let sigma_max = sigma.first().copied().unwrap_or(0.0);
        let tol = tol.unwrap_or_else(|| {
            let dim = self.shape[0].max(self.shape[1]) as f64;
            dim * sigma_max * f64::EPSILON
        });
        Ok(sigma.iter().filter(|&&s| s > tol).count())
    }
}

#[inline]
fn increment(idx: &mut [usize], shape: &[usize]) {
    for axis in (0..shape.len()).rev() {
        idx[axis] += 1;
        if idx[axis] < shape[axis] {
            return;
        }
        idx[axis] = 0;
    }
}
