//! MinMax minifloat fake-quantization with per-channel exponent bias.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::format::{minmax_bias, BiasedFormat, FpFormat};
use crate::io::TensorMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A tensor whose elements all lie on their channel's grid.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor<T: Scalar> {
    pub values: Tensor<T>,
    pub format: FpFormat,
    /// One bias per channel along `channel_axis`, or a single entry for
    /// per-tensor quantization.
    pub biases: Vec<i32>,
    /// `None` means a single bias for the whole tensor.
    pub channel_axis: Option<usize>,
}

impl<T: Scalar> QuantizedTensor<T> {
    pub fn biased_format(&self, channel: usize) -> BiasedFormat {
        self.format.with_bias(self.biases[channel])
    }

    /// Serializes as `name` (values) and `name.bias` (biases as floats).
    pub fn insert_into(&self, name: &str, map: &mut TensorMap<T>) {
        map.insert(name.to_owned(), self.values.clone());
        map.insert(
            format!("{name}.bias"),
            Tensor::vector(self.biases.iter().map(|&b| T::lit(b as f64)).collect()),
        );
    }
}

/// Maps each flat element index to its channel index.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ChannelIndexer {
    stride: usize,
    len: usize,
}

impl ChannelIndexer {
    pub(crate) fn new(shape: &[usize], axis: Option<usize>) -> Result<Self> {
        match axis {
            None => Ok(Self { stride: 1, len: 1 }),
            Some(a) if a < shape.len() => Ok(Self {
                stride: shape[a + 1..].iter().product(),
                len: shape[a],
            }),
            Some(a) => Err(Error::param(format!(
                "channel axis {a} out of range for shape {shape:?}"
            ))),
        }
    }

    pub(crate) fn channels(&self) -> usize {
        self.len
    }

    #[inline]
    pub(crate) fn channel(&self, flat: usize) -> usize {
        (flat / self.stride) % self.len
    }
}

/// Per-channel MinMax bias: the largest bias whose saturation value fits
/// under the channel's max magnitude.
pub fn channel_biases<T: Scalar>(
    a: &Tensor<T>,
    format: FpFormat,
    channel_axis: Option<usize>,
) -> Result<Vec<i32>> {
    let idx = ChannelIndexer::new(a.shape(), channel_axis)?;
    let mut maxes = vec![T::zero(); idx.channels()];
    for (i, &x) in a.data().iter().enumerate() {
        let c = idx.channel(i);
        maxes[c] = maxes[c].max(x.abs());
    }
    Ok(maxes.into_iter().map(|m| minmax_bias(format, m)).collect())
}

/// Rounds every element onto its channel grid for fixed biases.
pub fn quantize_with_biases<T: Scalar>(
    a: &Tensor<T>,
    format: FpFormat,
    biases: &[i32],
    channel_axis: Option<usize>,
) -> Result<QuantizedTensor<T>> {
    let idx = ChannelIndexer::new(a.shape(), channel_axis)?;
    if biases.len() != idx.channels() {
        return Err(Error::Dimension {
            op: "quantize_with_biases",
            lhs: a.shape().to_vec(),
            rhs: vec![biases.len()],
        });
    }
    let grids: Vec<BiasedFormat> = biases.iter().map(|&b| format.with_bias(b)).collect();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| grids[idx.channel(i)].round(x))
        .collect();
    Ok(QuantizedTensor {
        values: Tensor::new(a.shape().to_vec(), data)?,
        format,
        biases: biases.to_vec(),
        channel_axis,
    })
}

/// MinMax quantization: bias from each channel's max magnitude, magnitudes
/// clipped to the biased saturation value, then a per-element power-of-two
/// scale from the element's own exponent (floored at level 1) and
/// round-half-away-from-zero onto the mantissa grid.
pub fn minmax_quantize<T: Scalar>(
    a: &Tensor<T>,
    format: FpFormat,
    channel_axis: Option<usize>,
) -> Result<QuantizedTensor<T>> {
    if !a.is_finite() {
        return Err(Error::Data("cannot quantize non-finite values".into()));
    }
    let biases = channel_biases(a, format, channel_axis)?;
    quantize_with_biases(a, format, &biases, channel_axis)
}

/// Snaps a single value onto `±grid(bf)`.
pub fn round_to_grid<T: Scalar>(x: T, bf: BiasedFormat) -> T {
    bf.round(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QuantError {
    pub mse: f64,
    /// `+inf` when either the error or the signal is zero.
    #[serde(serialize_with = "crate::report::finite_or_string")]
    pub sqnr_db: f64,
    pub max_abs_err: f64,
    pub cosine: f64,
}

/// Error statistics of `approx` against the reference `reference`.
pub fn tensor_error<T: Scalar>(reference: &Tensor<T>, approx: &Tensor<T>) -> Result<QuantError> {
    reference.same_shape(approx, "quant_error")?;
    let n = reference.numel() as f64;
    let (mut se, mut ss, mut qq, mut dot, mut max_err) = (0.0, 0.0, 0.0, 0.0, 0.0f64);
    for (&a, &q) in reference.data().iter().zip(approx.data()) {
        let (a, q) = (a.as_f64(), q.as_f64());
        let e = a - q;
        se += e * e;
        ss += a * a;
        qq += q * q;
        dot += a * q;
        max_err = max_err.max(e.abs());
    }
    let mse = se / n;
    let signal = ss / n;
    let sqnr_db = if mse == 0.0 || signal == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal / mse).log10()
    };
    let cosine = if se == 0.0 {
        1.0
    } else if ss == 0.0 || qq == 0.0 {
        0.0
    } else {
        dot / (ss.sqrt() * qq.sqrt())
    };
    Ok(QuantError {
        mse,
        sqnr_db,
        max_abs_err: max_err,
        cosine,
    })
}

pub fn quant_error<T: Scalar>(a: &Tensor<T>, q: &QuantizedTensor<T>) -> Result<QuantError> {
    tensor_error(a, &q.values)
}
