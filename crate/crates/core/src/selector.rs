//! Data-driven choice of exponent/mantissa split for a weight matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{candidate_formats, FpFormat};
use crate::scalar::Scalar;
use crate::tensor::{quantile_abs, Tensor};

pub const DEFAULT_ALPHA: f64 = 25.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Lower percentile of `|W|` used as the spread denominator.
    pub alpha: f64,
    pub n_bits: u32,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            n_bits: 4,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 100.0) {
            return Err(Error::param(format!(
                "alpha {} outside (0, 100)",
                self.alpha
            )));
        }
        if self.n_bits < 2 {
            return Err(Error::param(format!("n_bits {} < 2", self.n_bits)));
        }
        Ok(())
    }
}

/// Fixed format, or per-matrix selection; written as `auto` or `ExMy`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FormatPolicy {
    #[default]
    Auto,
    Fixed(FpFormat),
}

impl FormatPolicy {
    pub fn resolve<T: Scalar>(&self, w: &Tensor<T>, sel: &SelectionConfig) -> Result<FpFormat> {
        match self {
            FormatPolicy::Fixed(f) => Ok(*f),
            FormatPolicy::Auto => select_format(w, sel),
        }
    }
}

impl std::fmt::Display for FormatPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FormatPolicy::Auto => f.write_str("auto"),
            FormatPolicy::Fixed(fmt) => write!(f, "{fmt}"),
        }
    }
}

impl std::str::FromStr for FormatPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            Ok(FormatPolicy::Auto)
        } else {
            Ok(FormatPolicy::Fixed(s.parse()?))
        }
    }
}

impl TryFrom<String> for FormatPolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FormatPolicy> for String {
    fn from(p: FormatPolicy) -> String {
        p.to_string()
    }
}

/// `s_w = max|W| / quantile(|W|, alpha)`; `+inf` when the quantile is zero.
pub fn spread_indicator<T: Scalar>(w: &Tensor<T>, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 100.0) {
        return Err(Error::param(format!("alpha {alpha} outside (0, 100)")));
    }
    let top = w.max_abs();
    if top == T::zero() {
        return Err(Error::Data(
            "spread of an all-zero tensor is undefined".into(),
        ));
    }
    let low = quantile_abs(w.data(), alpha)?;
    if low == T::zero() {
        return Ok(f64::INFINITY);
    }
    Ok((top / low).as_f64())
}

/// Candidate whose range ratio is closest to `s_w` in the log domain. Exact
/// ties go to the wider mantissa; an unbounded spread takes the widest range.
pub fn select_for_spread(s_w: f64, n_bits: u32) -> Result<FpFormat> {
    let candidates = candidate_formats(n_bits)?;
    if s_w.is_infinite() {
        return Ok(*candidates.last().expect("at least one candidate"));
    }
    let target = s_w.log2();
    let mut best = candidates[0];
    let mut best_dist = (best.range_ratio().log2() - target).abs();
    // candidates are ordered by decreasing mantissa width, so a strict
    // comparison keeps the wider mantissa on ties
    for f in &candidates[1..] {
        let d = (f.range_ratio().log2() - target).abs();
        if d < best_dist {
            best = *f;
            best_dist = d;
        }
    }
    Ok(best)
}

pub fn select_format<T: Scalar>(w: &Tensor<T>, cfg: &SelectionConfig) -> Result<FpFormat> {
    cfg.validate()?;
    select_for_spread(spread_indicator(w, cfg.alpha)?, cfg.n_bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spread_examples() {
        let c = Tensor::from_fn(4, 4, |_, _| -0.3f64);
        assert_eq!(spread_indicator(&c, 25.0).unwrap(), 1.0);
        let ramp = Tensor::vector((1..=100).map(f64::from).collect());
        assert_eq!(spread_indicator(&ramp, 25.0).unwrap(), 4.0);
        let mut v = vec![1.0f64; 100];
        v[17] = 100.0;
        assert_eq!(spread_indicator(&Tensor::vector(v), 25.0).unwrap(), 100.0);
    }

    #[test]
    fn spread_sentinels_and_errors() {
        let mut v = vec![0.0f64; 10];
        v[0] = 1.0;
        assert!(spread_indicator(&Tensor::vector(v), 25.0)
            .unwrap()
            .is_infinite());
        assert!(spread_indicator(&Tensor::vector(vec![0.0f64; 4]), 25.0).is_err());
        assert!(spread_indicator(&Tensor::vector(vec![1.0f64]), 0.0).is_err());
        assert!(spread_indicator(&Tensor::vector(vec![1.0f64]), 100.0).is_err());
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_for_spread(16.0, 4).unwrap(), FpFormat::E2M1);
        assert_eq!(select_for_spread(5.0, 4).unwrap(), FpFormat::E1M2);
        assert_eq!(select_for_spread(200.0, 4).unwrap(), FpFormat::E3M0);
        assert_eq!(select_for_spread(f64::INFINITY, 4).unwrap(), FpFormat::E3M0);
        assert_eq!(select_for_spread(1.0, 4).unwrap(), FpFormat::E1M2);
    }

    #[test]
    fn boundary_between_candidates() {
        // geometric midpoint of the E1M2 and E2M1 ratios
        let mid = (5.6f64 * 16.0).sqrt();
        assert_eq!(select_for_spread(mid * 0.999, 4).unwrap(), FpFormat::E1M2);
        assert_eq!(select_for_spread(mid * 1.001, 4).unwrap(), FpFormat::E2M1);
    }

    #[test]
    fn selection_is_monotone_in_spread() {
        for n in 2..=8 {
            let mut last = 0;
            for k in 0..400 {
                let s = 2f64.powf(k as f64 * 0.5);
                let e = select_for_spread(s, n).unwrap().exp_bits();
                assert!(e >= last);
                last = e;
            }
        }
    }
}
