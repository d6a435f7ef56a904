//! GPTQ on minifloat grids.
//!
//! Weights are `in x out`; each output column has its own MinMax bias,
//! frozen from the original weights before any update. Input rows are
//! quantized in natural order, block by block; the rounding error of each
//! row is spread over the remaining rows through the upper Cholesky factor
//! of the inverse (damped) Hessian `H = 2 XᵀX`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{BiasedFormat, FpFormat};
use crate::quantizer::{channel_biases, minmax_quantize, QuantizedTensor};
use crate::scalar::Scalar;
use crate::selector::{FormatPolicy, SelectionConfig};
use crate::tensor::{matmul, Tensor};

pub const DEFAULT_BLOCK_SIZE: usize = 64;
pub const DEFAULT_DAMPING: f64 = 1e-2;
pub const DEFAULT_CALIBRATION_SAMPLES: usize = 512;

/// Stacked `samples x in_dim` inputs of one projection.
#[derive(Clone, Debug)]
pub struct CalibrationSet<T: Scalar> {
    inputs: Tensor<T>,
}

impl<T: Scalar> CalibrationSet<T> {
    pub fn new(inputs: Tensor<T>) -> Result<Self> {
        inputs.require_matrix("calibration set")?;
        if !inputs.is_finite() {
            return Err(Error::Data("calibration inputs must be finite".into()));
        }
        Ok(Self { inputs })
    }

    pub fn inputs(&self) -> &Tensor<T> {
        &self.inputs
    }

    pub fn samples(&self) -> usize {
        self.inputs.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.inputs.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GptqConfig {
    pub block_size: usize,
    /// Added to the Hessian diagonal as a fraction of its mean.
    pub damping: f64,
    pub format: FormatPolicy,
    pub selection: SelectionConfig,
}

impl Default for GptqConfig {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
            damping: DEFAULT_DAMPING,
            format: FormatPolicy::Fixed(FpFormat::E2M1),
            selection: SelectionConfig::default(),
        }
    }
}

impl GptqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::param("block size must be at least 1"));
        }
        if !self.damping.is_finite() || self.damping <= 0.0 {
            return Err(Error::param(format!(
                "damping {} must be positive",
                self.damping
            )));
        }
        self.selection.validate()
    }
}

/// `2 XᵀX` over the calibration inputs, before damping.
pub fn hessian<T: Scalar>(cal: &CalibrationSet<T>) -> Tensor<T> {
    let x = cal.inputs();
    let g = matmul(&x.transpose(), x).expect("conformable");
    g.scale(T::lit(2.0))
}

/// Makes `h` positive definite: zero diagonals (inputs never active) become
/// one, then `damping * mean(diag)` is added to the diagonal.
pub fn dampen<T: Scalar>(h: &Tensor<T>, damping: f64) -> Tensor<T> {
    let n = h.rows();
    let mut data = h.data().to_vec();
    for i in 0..n {
        if data[i * n + i] == T::zero() {
            data[i * n + i] = T::one();
        }
    }
    let mean = (0..n).map(|i| data[i * n + i]).sum::<T>() / T::lit(n as f64);
    let add = T::lit(damping) * mean;
    for i in 0..n {
        data[i * n + i] = data[i * n + i] + add;
    }
    Tensor::matrix(n, n, data).expect("square")
}

/// Lower Cholesky factor `L` with `A = L Lᵀ`.
pub fn cholesky<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let n = a.rows();
    let mut l = vec![T::zero(); n * n];
    for j in 0..n {
        let mut diag = a.at(j, j);
        for k in 0..j {
            diag = diag - l[j * n + k] * l[j * n + k];
        }
        if !diag.is_finite() || diag <= T::zero() {
            return Err(Error::Numerical(format!(
                "matrix not positive definite: pivot {j} is {diag}"
            )));
        }
        let d = diag.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a.at(i, j);
            for k in 0..j {
                s = s - l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Tensor::matrix(n, n, l)
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
pub fn spd_inverse<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let l = cholesky(a)?;
    let n = a.rows();
    // forward substitution for L⁻¹
    let mut inv_l = vec![T::zero(); n * n];
    for col in 0..n {
        for i in col..n {
            let mut s = if i == col { T::one() } else { T::zero() };
            for k in col..i {
                s = s - l.at(i, k) * inv_l[k * n + col];
            }
            inv_l[i * n + col] = s / l.at(i, i);
        }
    }
    let inv_l = Tensor::matrix(n, n, inv_l)?;
    let inv = matmul(&inv_l.transpose(), &inv_l)?;
    // symmetrize away rounding asymmetry
    Ok(Tensor::from_fn(n, n, |i, j| {
        (inv.at(i, j) + inv.at(j, i)) / T::lit(2.0)
    }))
}

/// `‖X Ŵ − X W‖²` over the calibration inputs.
pub fn layer_objective<T: Scalar>(
    w: &Tensor<T>,
    w_hat: &Tensor<T>,
    cal: &CalibrationSet<T>,
) -> Result<f64> {
    w.same_shape(w_hat, "layer_objective")?;
    let diff = matmul(cal.inputs(), &w_hat.sub(w)?)?;
    Ok(diff.data().iter().map(|v| v.as_f64() * v.as_f64()).sum())
}

/// Round-to-nearest baseline: MinMax per output channel.
pub fn rtn_quantize<T: Scalar>(w: &Tensor<T>, format: FpFormat) -> Result<QuantizedTensor<T>> {
    minmax_quantize(w, format, Some(1))
}

/// GPTQ with the format resolved from `cfg.format`.
pub fn gptq_quantize<T: Scalar>(
    w: &Tensor<T>,
    cal: &CalibrationSet<T>,
    cfg: &GptqConfig,
) -> Result<QuantizedTensor<T>> {
    cfg.validate()?;
    let format = cfg.format.resolve(w, &cfg.selection)?;
    gptq_quantize_with_format(w, cal, format, cfg)
}

pub fn gptq_quantize_with_format<T: Scalar>(
    w: &Tensor<T>,
    cal: &CalibrationSet<T>,
    format: FpFormat,
    cfg: &GptqConfig,
) -> Result<QuantizedTensor<T>> {
    cfg.validate()?;
    let (rows, cols) = w.require_matrix("gptq")?;
    if cal.in_dim() != rows {
        return Err(Error::Dimension {
            op: "gptq calibration",
            lhs: w.shape().to_vec(),
            rhs: cal.inputs().shape().to_vec(),
        });
    }
    if !w.is_finite() {
        return Err(Error::Data("cannot quantize non-finite weights".into()));
    }
    let biases = channel_biases(w, format, Some(1))?;
    let grids: Vec<BiasedFormat> = biases.iter().map(|&b| format.with_bias(b)).collect();

    let h = dampen(&hessian(cal), cfg.damping);
    let h_inv = spd_inverse(&h)?;
    // upper factor U with H⁻¹ = UᵀU
    let u = cholesky(&h_inv)
        .map_err(|e| Error::Numerical(format!("inverse Hessian factorization failed: {e}")))?
        .transpose();

    let mut work = w.data().to_vec();
    let mut out = vec![T::zero(); rows * cols];
    let mut block_start = 0;
    while block_start < rows {
        let block_end = (block_start + cfg.block_size).min(rows);
        let mut err = vec![T::zero(); (block_end - block_start) * cols];
        for i in block_start..block_end {
            let d = u.at(i, i);
            let e_row = (i - block_start) * cols;
            for j in 0..cols {
                let v = work[i * cols + j];
                let q = grids[j].round(v);
                out[i * cols + j] = q;
                err[e_row + j] = (v - q) / d;
            }
            for k in i + 1..block_end {
                let f = u.at(i, k);
                for j in 0..cols {
                    work[k * cols + j] = work[k * cols + j] - err[e_row + j] * f;
                }
            }
        }
        for k in block_end..rows {
            for i in block_start..block_end {
                let f = u.at(i, k);
                let e_row = (i - block_start) * cols;
                for j in 0..cols {
                    work[k * cols + j] = work[k * cols + j] - err[e_row + j] * f;
                }
            }
        }
        block_start = block_end;
    }

    Ok(QuantizedTensor {
        values: Tensor::matrix(rows, cols, out)?,
        format,
        biases,
        channel_axis: Some(1),
    })
}
