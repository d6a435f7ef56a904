//! End-to-end simulation of one quantized block on synthetic data.
//!
//! The reference path runs the original block in full precision. The
//! quantized path fuses the rotations (when enabled), quantizes the six
//! projections per output channel, and fake-quantizes every projection
//! input per channel after its online rotation.

use serde::{Deserialize, Serialize};

use crate::block::{forward, forward_plain, DiTBlockWeights, Linear, OnlineSchedule, Site};
use crate::error::{Error, Result};
use crate::format::FpFormat;
use crate::fusion::{fuse_block, FusionPlan, VMode};
use crate::gptq::{gptq_quantize_with_format, rtn_quantize, CalibrationSet, GptqConfig};
use crate::hadamard::{HadamardSpec, OpCount};
use crate::quantizer::{minmax_quantize, quant_error, tensor_error};
use crate::report::{
    CostReport, DistributionReport, DistributionStats, HadamardCost, LayerReport, LinearCost,
    QuantReport, SCHEMA_VERSION,
};
use crate::selector::{FormatPolicy, SelectionConfig};
use crate::synth;
use crate::tensor::{channel_max_median_ratio, kurtosis, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMethod {
    #[default]
    Gptq,
    Rtn,
    None,
}

impl std::str::FromStr for WeightMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gptq" => Ok(WeightMethod::Gptq),
            "rtn" => Ok(WeightMethod::Rtn),
            "none" => Ok(WeightMethod::None),
            _ => Err(Error::param(format!(
                "weight method must be gptq, rtn or none, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    /// Embedding dimension; the hidden layer is `4n`.
    pub n: usize,
    pub heads: usize,
    pub tokens: usize,
    pub outlier_channels: usize,
    pub outlier_scale: f64,
    pub weight_format: FormatPolicy,
    pub weight_bits: u32,
    /// `None` keeps activations in full precision.
    pub activation_format: Option<FpFormat>,
    pub hadamard: bool,
    pub weight_method: WeightMethod,
    pub v_mode: VMode,
    pub alpha: f64,
    pub calib_samples: usize,
    pub block_size: usize,
    pub damping: f64,
    /// Fraction of weight entries inflated 8x.
    pub heavy_tail: f64,
    pub seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            n: 64,
            heads: 4,
            tokens: 128,
            outlier_channels: 2,
            outlier_scale: 100.0,
            weight_format: FormatPolicy::Auto,
            weight_bits: 4,
            activation_format: Some(FpFormat::E2M1),
            hadamard: true,
            weight_method: WeightMethod::Gptq,
            v_mode: VMode::PerHeadExact,
            alpha: crate::selector::DEFAULT_ALPHA,
            calib_samples: crate::gptq::DEFAULT_CALIBRATION_SAMPLES,
            block_size: crate::gptq::DEFAULT_BLOCK_SIZE,
            damping: crate::gptq::DEFAULT_DAMPING,
            heavy_tail: 0.0,
            seed: 0,
        }
    }
}

impl HarnessConfig {
    pub fn hidden(&self) -> usize {
        4 * self.n
    }

    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            alpha: self.alpha,
            n_bits: self.weight_bits,
        }
    }

    pub fn gptq(&self) -> GptqConfig {
        GptqConfig {
            block_size: self.block_size,
            damping: self.damping,
            format: self.weight_format,
            selection: self.selection(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.heads == 0 || self.tokens == 0 {
            return Err(Error::param("n, heads and tokens must be positive"));
        }
        if !self.n.is_multiple_of(self.heads) {
            return Err(Error::param(format!(
                "embedding dim {} not divisible by {} heads",
                self.n, self.heads
            )));
        }
        if self.outlier_channels > self.n {
            return Err(Error::param(format!(
                "{} outlier channels requested for {} channels",
                self.outlier_channels, self.n
            )));
        }
        if !(self.outlier_scale > 0.0 && self.outlier_scale.is_finite()) {
            return Err(Error::param(format!(
                "outlier scale {} must be positive",
                self.outlier_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.heavy_tail) {
            return Err(Error::param(format!(
                "heavy tail fraction {} outside [0, 1]",
                self.heavy_tail
            )));
        }
        if self.calib_samples == 0 {
            return Err(Error::param("calib_samples must be positive"));
        }
        if let FormatPolicy::Fixed(f) = self.weight_format {
            if f.n_bits() != self.weight_bits {
                return Err(Error::param(format!(
                    "weight format {f} has {} bits but weight_bits is {}",
                    f.n_bits(),
                    self.weight_bits
                )));
            }
        }
        crate::format::candidate_formats(self.weight_bits)?;
        self.gptq().validate()?;
        if self.hadamard {
            self.plan()?;
        }
        Ok(())
    }

    fn plan(&self) -> Result<FusionPlan> {
        FusionPlan::new(self.n, self.heads, self.v_mode, Some(self.seed))
    }
}

fn sub_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k)
}

/// Block input for the run: Gaussian tokens with outlier channels.
pub fn gen_activations(cfg: &HarnessConfig) -> Result<Tensor<f64>> {
    synth::gen_activations(
        cfg.tokens,
        cfg.n,
        cfg.outlier_channels,
        cfg.outlier_scale,
        sub_seed(cfg.seed, 1),
    )
}

/// Original full-precision block of the run.
pub fn block_weights(cfg: &HarnessConfig) -> DiTBlockWeights<f64> {
    synth::random_block(cfg.n, cfg.heads, sub_seed(cfg.seed, 0), cfg.heavy_tail)
}

fn site_index(site: Site) -> usize {
    match site {
        Site::AttnInput => 0,
        Site::AttnOutput => 1,
        Site::FfnInput => 2,
        Site::FfnHidden => 3,
    }
}

/// Projection inputs at every site, gathered from full-precision passes of
/// `w` over fresh synthetic draws.
fn calibrate(
    cfg: &HarnessConfig,
    w: &DiTBlockWeights<f64>,
    online: &OnlineSchedule,
) -> Result<Vec<CalibrationSet<f64>>> {
    let draws = cfg.calib_samples.div_ceil(cfg.tokens);
    let mut captured: Vec<Vec<Tensor<f64>>> = vec![Vec::new(); 4];
    for d in 0..draws {
        let x = synth::gen_activations(
            cfg.tokens,
            cfg.n,
            cfg.outlier_channels,
            cfg.outlier_scale,
            sub_seed(cfg.seed, 100 + d as u64),
        )?;
        forward(&x, w, online, &mut |site, t| {
            captured[site_index(site)].push(t.clone());
            Ok(t)
        })?;
    }
    captured
        .into_iter()
        .map(|parts| {
            let all = Tensor::vconcat(&parts)?;
            let cols = all.cols();
            let keep = cfg.calib_samples * cols;
            let data = all.into_data()[..keep].to_vec();
            CalibrationSet::new(Tensor::matrix(cfg.calib_samples, cols, data)?)
        })
        .collect()
}

fn stats(t: &Tensor<f64>) -> DistributionStats {
    DistributionStats {
        channel_max_median_ratio: channel_max_median_ratio(t),
        kurtosis: kurtosis(t),
    }
}

fn distribution(
    cfg: &HarnessConfig,
    x: &Tensor<f64>,
    w: &DiTBlockWeights<f64>,
) -> Result<DistributionReport> {
    let mut attn_in = None;
    let mut hidden = None;
    forward(x, w, &OnlineSchedule::none(), &mut |site, t| {
        match site {
            Site::AttnInput => attn_in = Some(t.clone()),
            Site::FfnHidden => hidden = Some(t.clone()),
            _ => {}
        }
        Ok(t)
    })?;
    let attn_in = attn_in.expect("attention input visited");
    let hidden = hidden.expect("hidden activation visited");
    let rotated = |t: &Tensor<f64>, n: usize, k: u64| -> Result<Option<DistributionStats>> {
        match HadamardSpec::build(n, Some(sub_seed(cfg.seed, k))) {
            Ok(h) => Ok(Some(stats(&h.apply_right(t)?))),
            Err(_) if !cfg.hadamard => Ok(None),
            Err(e) => Err(e),
        }
    };
    Ok(DistributionReport {
        block_input: stats(x),
        attn_input_pre: stats(&attn_in),
        attn_input_post: rotated(&attn_in, cfg.n, 2)?,
        ffn_hidden_pre: stats(&hidden),
        ffn_hidden_post: rotated(&hidden, cfg.hidden(), 3)?,
    })
}

/// Runs the reference and quantized paths and reports their agreement.
pub fn run(cfg: &HarnessConfig) -> Result<QuantReport<HarnessConfig>> {
    cfg.validate()?;
    let weights = block_weights(cfg);
    let x = gen_activations(cfg)?;
    let reference = forward_plain(&x, &weights, &OnlineSchedule::none())?;

    let (mut deployed, online) = if cfg.hadamard {
        let fused = fuse_block(&weights, &cfg.plan()?)?;
        (fused.weights, fused.online)
    } else {
        (weights.clone(), OnlineSchedule::none())
    };

    let mut layers = Vec::new();
    if cfg.weight_method != WeightMethod::None {
        let calib = match cfg.weight_method {
            WeightMethod::Gptq => Some(calibrate(cfg, &deployed, &online)?),
            _ => None,
        };
        let gptq = cfg.gptq();
        for l in Linear::ALL {
            let w = deployed.get(l);
            let format = cfg.weight_format.resolve(w, &cfg.selection())?;
            let q = match &calib {
                Some(sets) => {
                    gptq_quantize_with_format(w, &sets[site_index(l.site())], format, &gptq)?
                }
                None => rtn_quantize(w, format)?,
            };
            let n_bias = q.biases.len() as f64;
            layers.push(LayerReport {
                name: l.name().to_string(),
                format,
                bias_min: q.biases.iter().copied().min().unwrap_or(0),
                bias_max: q.biases.iter().copied().max().unwrap_or(0),
                bias_mean: q.biases.iter().map(|&b| f64::from(b)).sum::<f64>() / n_bias,
                error: quant_error(w, &q)?,
            });
            *deployed.get_mut(l) = q.values;
        }
    }

    let act = cfg.activation_format;
    let output = forward(&x, &deployed, &online, &mut |_, t| match act {
        Some(f) => Ok(minmax_quantize(&t, f, Some(1))?.values),
        None => Ok(t),
    })?;

    Ok(QuantReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        layers,
        end_to_end: tensor_error(&reference, &output)?,
        distribution: distribution(cfg, &x, &weights)?,
        cost: estimate_cost(cfg)?,
    })
}

/// Analytic per-block cost of the configured pipeline.
pub fn estimate_cost(cfg: &HarnessConfig) -> Result<CostReport> {
    cfg.validate()?;
    let (n, hidden, t) = (cfg.n, cfg.hidden(), cfg.tokens);
    let linears: Vec<LinearCost> = Linear::ALL
        .iter()
        .map(|&l| {
            let (in_dim, out_dim) = match l {
                Linear::Fc1 => (n, hidden),
                Linear::Fc2 => (hidden, n),
                _ => (n, n),
            };
            LinearCost {
                name: l.name().to_string(),
                in_dim,
                out_dim,
                macs: (t * in_dim * out_dim) as u64,
            }
        })
        .collect();
    let linear_macs = linears.iter().map(|c| c.macs).sum();
    let weight_params: u64 = linears.iter().map(|c| (c.in_dim * c.out_dim) as u64).sum();
    let channels: u64 = linears.iter().map(|c| c.out_dim as u64).sum();

    let hadamard = if cfg.hadamard {
        let plan = cfg.plan()?;
        let one = plan.input.op_count(t, n)?;
        let input = one + one;
        let head_mix = match crate::fusion::head_mix_online(&plan) {
            Some(h) => OnlineSchedule {
                head_mix: Some(h),
                ..OnlineSchedule::none()
            }
            .op_count(t, n, hidden)?,
            None => OpCount::default(),
        };
        let hidden_ops = plan.hidden.op_count(t, hidden)?;
        HadamardCost {
            input,
            head_mix,
            hidden: hidden_ops,
            total: input + head_mix + hidden_ops,
        }
    } else {
        HadamardCost {
            input: OpCount::default(),
            head_mix: OpCount::default(),
            hidden: OpCount::default(),
            total: OpCount::default(),
        }
    };

    let full_bits = 32u32;
    let bytes_full = weight_params * u64::from(full_bits) / 8;
    let bytes_quant = (weight_params * u64::from(cfg.weight_bits)).div_ceil(8);
    Ok(CostReport {
        linears,
        linear_macs,
        attention_macs: 2 * (t * t * n) as u64,
        hadamard,
        weight_params,
        full_precision_bits: full_bits,
        quantized_bits: cfg.weight_bits,
        bytes_full_precision: bytes_full,
        bytes_quantized: bytes_quant,
        bytes_bias: channels,
        compression_ratio: bytes_full as f64 / bytes_quant as f64,
        compression_ratio_with_bias: bytes_full as f64 / (bytes_quant + channels) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> HarnessConfig {
        HarnessConfig {
            n: 16,
            heads: 2,
            tokens: 32,
            calib_samples: 64,
            ..Default::default()
        }
    }

    #[test]
    fn disabled_quantization_is_exact() {
        let cfg = HarnessConfig {
            hadamard: false,
            weight_method: WeightMethod::None,
            activation_format: None,
            ..small()
        };
        let r = run(&cfg).unwrap();
        assert_eq!(r.end_to_end.mse, 0.0);
        assert!(r.layers.is_empty());
    }

    #[test]
    fn fusion_alone_is_invariant() {
        let cfg = HarnessConfig {
            weight_method: WeightMethod::None,
            activation_format: None,
            ..small()
        };
        assert!(run(&cfg).unwrap().end_to_end.mse <= 1e-18);
    }

    #[test]
    fn config_errors_surface_first() {
        for bad in [
            HarnessConfig {
                heads: 3,
                ..small()
            },
            HarnessConfig {
                outlier_channels: 17,
                ..small()
            },
            HarnessConfig {
                n: 36,
                heads: 4,
                ..small()
            },
            HarnessConfig {
                weight_format: FormatPolicy::Fixed(FpFormat::E4M3),
                ..small()
            },
            HarnessConfig {
                alpha: 0.0,
                ..small()
            },
            HarnessConfig {
                block_size: 0,
                ..small()
            },
        ] {
            assert!(matches!(
                run(&bad),
                Err(Error::Parameter(_)) | Err(Error::UnsupportedOrder { .. })
            ));
        }
    }

    #[test]
    fn cost_examples() {
        let c = estimate_cost(&HarnessConfig::default()).unwrap();
        assert_eq!(c.linears[0].macs, 524_288);
        assert_eq!(c.hadamard.hidden.adds, 128 * 256 * 8);
        assert_eq!(c.compression_ratio, 8.0);
        assert_eq!(c.weight_params, 12 * 64 * 64);
        assert!(c.compression_ratio_with_bias < 8.0);
    }

    #[test]
    fn reports_are_deterministic() {
        let a = serde_json::to_string(&run(&small()).unwrap()).unwrap();
        let b = serde_json::to_string(&run(&small()).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("\"schema_version\":1"));
    }

    #[test]
    fn config_json_defaults_and_unknown_keys() {
        let cfg: HarnessConfig =
            serde_json::from_str(r#"{"n": 32, "weight_format": "E2M1"}"#).unwrap();
        assert_eq!(cfg.n, 32);
        assert_eq!(cfg.weight_format, FormatPolicy::Fixed(FpFormat::E2M1));
        assert_eq!(cfg.heads, 4);
        assert!(serde_json::from_str::<HarnessConfig>(r#"{"nn": 32}"#).is_err());
        let cfg: HarnessConfig = serde_json::from_str(r#"{"activation_format": null}"#).unwrap();
        assert_eq!(cfg.activation_format, None);
    }
}
