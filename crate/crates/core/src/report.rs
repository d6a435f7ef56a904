//! Serializable simulation and cost reports.

use serde::Serialize;

use crate::format::FpFormat;
use crate::hadamard::OpCount;
use crate::quantizer::QuantError;

/// Bumped whenever a report field is renamed, removed or changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

pub(crate) fn finite_or_string<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.collect_str(v)
    }
}

/// Weight quantization outcome for one projection.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerReport {
    pub name: String,
    pub format: FpFormat,
    pub bias_min: i32,
    pub bias_max: i32,
    pub bias_mean: f64,
    /// Quantized weights against the (possibly fused) full-precision ones.
    pub error: QuantError,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DistributionStats {
    #[serde(serialize_with = "finite_or_string")]
    pub channel_max_median_ratio: f64,
    pub kurtosis: f64,
}

/// Activation statistics of the full-precision block before and after the
/// rotations.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistributionReport {
    pub block_input: DistributionStats,
    pub attn_input_pre: DistributionStats,
    /// `None` when the rotation order is unsupported and rotations are off.
    pub attn_input_post: Option<DistributionStats>,
    pub ffn_hidden_pre: DistributionStats,
    pub ffn_hidden_post: Option<DistributionStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinearCost {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HadamardCost {
    /// Both normalized inputs.
    pub input: OpCount,
    pub head_mix: OpCount,
    pub hidden: OpCount,
    pub total: OpCount,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub linears: Vec<LinearCost>,
    pub linear_macs: u64,
    /// `QKᵀ` and `AV` products, kept in full precision.
    pub attention_macs: u64,
    pub hadamard: HadamardCost,
    pub weight_params: u64,
    pub full_precision_bits: u32,
    pub quantized_bits: u32,
    pub bytes_full_precision: u64,
    pub bytes_quantized: u64,
    /// One 8-bit exponent bias per output channel.
    pub bytes_bias: u64,
    /// `bytes_full_precision / bytes_quantized`, bias excluded.
    pub compression_ratio: f64,
    pub compression_ratio_with_bias: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct QuantReport<C: Serialize> {
    pub schema_version: u32,
    pub config: C,
    pub layers: Vec<LayerReport>,
    pub end_to_end: QuantError,
    pub distribution: DistributionReport,
    pub cost: CostReport,
}
