//! Dense row-major tensors and the handful of linear-algebra kernels the
//! quantization pipeline needs.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor.
///
/// Matrices follow the `tokens x features` / `in_dim x out_dim` convention so
/// products compose left to right as `X W`; channels are columns.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::param(format!(
                "tensor shape must have positive dimensions, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    /// Convenience constructor for a `rows x cols` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row count when viewed as a matrix (all leading axes flattened).
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn rows_iter(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.cols())
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        self.rows_iter().map(|r| r[j]).collect()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.ndim() != 2 {
            return Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        Self::from_fn(c, r, |i, j| self.data[j * c + i])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    /// Largest element-wise absolute difference.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Self {
        let rows = self.rows();
        Self::from_fn(rows, width, |i, j| self.at(i, start + j))
    }

    /// Concatenates equally tall matrices along the column axis.
    pub fn hconcat(parts: &[Self]) -> Result<Self> {
        let rows = parts
            .first()
            .ok_or_else(|| Error::param("hconcat of zero parts"))?
            .rows();
        if let Some(bad) = parts.iter().find(|p| p.rows() != rows || p.ndim() != 2) {
            return Err(Error::Dimension {
                op: "hconcat",
                lhs: parts[0].shape.clone(),
                rhs: bad.shape.clone(),
            });
        }
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Self::matrix(rows, cols, data)
    }

    /// Stacks equally wide matrices along the row axis.
    pub fn vconcat(parts: &[Self]) -> Result<Self> {
        let cols = parts
            .first()
            .ok_or_else(|| Error::param("vconcat of zero parts"))?
            .cols();
        let mut data = Vec::new();
        for p in parts {
            if p.cols() != cols {
                return Err(Error::Dimension {
                    op: "vconcat",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            data.extend_from_slice(&p.data);
        }
        Self::matrix(data.len() / cols, cols, data)
    }
}

/// Standard matrix product `a (m x k) * b (k x n)`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let src = &b.data[p * n..(p + 1) * n];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + aip * s;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Kronecker product of two matrices.
pub fn kron<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    Tensor::from_fn(ar * br, ac * bc, |i, j| {
        a.at(i / br, j / bc) * b.at(i % br, j % bc)
    })
}

/// Per-column statistic selector for [`channel_stat`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ChannelStat {
    MaxAbs,
    MedianAbs,
    /// Lower nearest-rank percentile of `|x|`, percent in `(0, 100)`.
    Quantile(f64),
}

/// Lower nearest-rank percentile of `|values|`: the element at 1-based rank
/// `ceil(pct/100 * N)` of the sorted magnitudes, with rank clamped to `[1, N]`
/// so that `pct = 0` yields the minimum and `pct = 100` the maximum.
pub fn quantile_abs<T: Scalar>(values: &[T], pct: f64) -> Result<T> {
    if values.is_empty() {
        return Err(Error::param("quantile of empty set"));
    }
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::param(format!("percentile {pct} outside [0, 100]")));
    }
    let mut mags: Vec<T> = values.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| a.partial_cmp(b).expect("finite magnitudes"));
    let n = mags.len();
    let rank = ((pct / 100.0) * n as f64).ceil() as usize;
    Ok(mags[rank.clamp(1, n) - 1])
}

/// Median of `|values|` (mean of the two central order statistics for even N).
pub fn median_abs<T: Scalar>(values: &[T]) -> T {
    let mut mags: Vec<T> = values.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| a.partial_cmp(b).expect("finite magnitudes"));
    let n = mags.len();
    if n % 2 == 1 {
        mags[n / 2]
    } else {
        (mags[n / 2 - 1] + mags[n / 2]) / T::lit(2.0)
    }
}

/// Computes `stat` over each column of `t`, viewed as a matrix.
pub fn channel_stat<T: Scalar>(t: &Tensor<T>, stat: ChannelStat) -> Result<Vec<T>> {
    if let ChannelStat::Quantile(alpha) = stat {
        if !(alpha > 0.0 && alpha < 100.0) {
            return Err(Error::param(format!(
                "quantile percentile {alpha} outside (0, 100)"
            )));
        }
    }
    (0..t.cols())
        .map(|j| {
            let col = t.column(j);
            Ok(match stat {
                ChannelStat::MaxAbs => col.iter().fold(T::zero(), |m, x| m.max(x.abs())),
                ChannelStat::MedianAbs => median_abs(&col),
                ChannelStat::Quantile(alpha) => quantile_abs(&col, alpha)?,
            })
        })
        .collect()
}

/// Ratio of the largest to the median per-channel max magnitude. Near 1 for
/// evenly spread activations, large when a few channels carry outliers.
pub fn channel_max_median_ratio<T: Scalar>(t: &Tensor<T>) -> T {
    let maxes = channel_stat(t, ChannelStat::MaxAbs).expect("max_abs never fails");
    let top = maxes.iter().fold(T::zero(), |m, &x| m.max(x));
    let mid = median_abs(&maxes);
    if mid == T::zero() {
        T::infinity()
    } else {
        top / mid
    }
}

/// Pearson kurtosis `m4 / m2^2` over all elements (3 for a Gaussian).
pub fn kurtosis<T: Scalar>(t: &Tensor<T>) -> T {
    let n = T::lit(t.numel() as f64);
    let mean = t.data().iter().copied().sum::<T>() / n;
    let (m2, m4) = t
        .data()
        .iter()
        .fold((T::zero(), T::zero()), |(m2, m4), &x| {
            let d2 = (x - mean) * (x - mean);
            (m2 + d2, m4 + d2 * d2)
        });
    let (m2, m4) = (m2 / n, m4 / n);
    if m2 == T::zero() {
        T::zero()
    } else {
        m4 / (m2 * m2)
    }
}
