//! ExMy minifloat formats and their representable grids.
//!
//! A format with `e` exponent bits and `m` mantissa bits has exponent levels
//! `1..=2^e - 1`; level `l` covers magnitudes `k * 2^(l - m + bias)` for
//! integer `k` in `[2^m, 2^(m+1))`. Below level 1 sits a uniform subnormal
//! region `k * 2^(1 - m + bias)`, `k in [0, 2^m)`, so zero is always
//! representable. There are no NaN or infinity encodings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FpFormat {
    exp_bits: u8,
    man_bits: u8,
}

impl FpFormat {
    pub const E1M2: FpFormat = FpFormat {
        exp_bits: 1,
        man_bits: 2,
    };
    pub const E2M1: FpFormat = FpFormat {
        exp_bits: 2,
        man_bits: 1,
    };
    pub const E3M0: FpFormat = FpFormat {
        exp_bits: 3,
        man_bits: 0,
    };
    pub const E4M3: FpFormat = FpFormat {
        exp_bits: 4,
        man_bits: 3,
    };
    pub const E2M5: FpFormat = FpFormat {
        exp_bits: 2,
        man_bits: 5,
    };

    pub fn new(exp_bits: u8, man_bits: u8) -> Result<Self> {
        if exp_bits == 0 {
            return Err(Error::param(format!(
                "E{exp_bits}M{man_bits}: at least one exponent bit is required"
            )));
        }
        // keeps 2^(2^e) and the grid size within f64 range
        if exp_bits > 8 || man_bits > 23 {
            return Err(Error::param(format!(
                "E{exp_bits}M{man_bits}: exponent bits must be <= 8 and mantissa bits <= 23"
            )));
        }
        Ok(Self { exp_bits, man_bits })
    }

    pub fn exp_bits(self) -> u32 {
        self.exp_bits as u32
    }

    pub fn man_bits(self) -> u32 {
        self.man_bits as u32
    }

    /// Total width including the sign bit.
    pub fn n_bits(self) -> u32 {
        1 + self.exp_bits() + self.man_bits()
    }

    /// Highest exponent level, `2^e - 1`.
    pub fn top_level(self) -> i32 {
        (1i32 << self.exp_bits) - 1
    }

    /// Largest magnitude at bias 0: `2^(2^e - 1) * (2 - 2^-m)`.
    pub fn max_val(self) -> f64 {
        2f64.powi(self.top_level()) * (2.0 - 2f64.powi(-(self.man_bits() as i32)))
    }

    /// Dynamic-range ratio `r = 2^(2^e) * (2 - 2^-m) / (1 + 2^-m)` used to
    /// match a format against a weight spread indicator.
    pub fn range_ratio(self) -> f64 {
        let ulp = 2f64.powi(-(self.man_bits() as i32));
        2f64.powi(1 << self.exp_bits) * (2.0 - ulp) / (1.0 + ulp)
    }

    pub fn with_bias(self, bias: i32) -> BiasedFormat {
        BiasedFormat { format: self, bias }
    }
}

/// Every format of the given total width with at least one exponent bit,
/// ordered by increasing exponent width (`E1M(n-2)` first).
pub fn candidate_formats(n_bits: u32) -> Result<Vec<FpFormat>> {
    if n_bits < 2 {
        return Err(Error::param(format!("need at least 2 bits, got {n_bits}")));
    }
    (1..n_bits)
        .map(|e| FpFormat::new(e as u8, (n_bits - 1 - e) as u8))
        .collect()
}

impl fmt::Display for FpFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E{}M{}", self.exp_bits, self.man_bits)
    }
}

impl FromStr for FpFormat {
    type Err = Error;

    /// Parses `E<k>M<j>`, case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::param(format!("bad format string {s:?}, expected E<k>M<j>"));
        let upper = s.trim().to_ascii_uppercase();
        let rest = upper.strip_prefix('E').ok_or_else(bad)?;
        let (e, m) = rest.split_once('M').ok_or_else(bad)?;
        let e: u8 = e.parse().map_err(|_| bad())?;
        let m: u8 = m.parse().map_err(|_| bad())?;
        FpFormat::new(e, m)
    }
}

impl Serialize for FpFormat {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FpFormat {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A format together with an exponent bias that shifts its grid by `2^bias`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiasedFormat {
    pub format: FpFormat,
    pub bias: i32,
}

impl BiasedFormat {
    /// `2^(2^e + bias - 1) * (2 - 2^-m)`.
    pub fn value_max<T: Scalar>(&self) -> T {
        T::lit(self.format.max_val()) * T::exp2i(self.bias)
    }

    /// Spacing of the subnormal region and of exponent level 1.
    pub fn min_step<T: Scalar>(&self) -> T {
        T::exp2i(1 - self.format.man_bits() as i32 + self.bias)
    }

    /// Sorted nonnegative representable magnitudes, zero included.
    pub fn grid<T: Scalar>(&self) -> Vec<T> {
        let m = self.format.man_bits() as i32;
        let lead = 1u64 << m;
        let mut out = Vec::with_capacity((self.format.top_level() as usize + 1) << m);
        let step = self.min_step::<T>();
        for k in 0..lead {
            out.push(T::lit(k as f64) * step);
        }
        for level in 1..=self.format.top_level() {
            let step = T::exp2i(level - m + self.bias);
            for k in lead..2 * lead {
                out.push(T::lit(k as f64) * step);
            }
        }
        out
    }

    /// Snaps `x` to the nearest signed grid point. Ties go away from zero and
    /// magnitudes beyond [`value_max`](Self::value_max) saturate.
    pub fn round<T: Scalar>(&self, x: T) -> T {
        if x == T::zero() {
            return x;
        }
        let limit = self.value_max::<T>();
        let mag = x.abs().min(limit);
        let m = self.format.man_bits() as i32;
        // exponent level of the magnitude, floored into the subnormal region
        let level = (mag.floor_log2() - self.bias).max(1);
        let step = T::exp2i(level - m + self.bias);
        // round half away from zero on a nonnegative quotient
        let q = ((mag / step) + T::lit(0.5)).floor() * step;
        let q = q.min(limit);
        if x < T::zero() {
            -q
        } else {
            q
        }
    }
}

impl fmt::Display for BiasedFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(bias {})", self.format, self.bias)
    }
}

/// Largest bias whose saturation value does not exceed `max_abs`, i.e.
/// `floor(log2(max_abs) - log2(max_val))`, evaluated exactly. Zero for an
/// all-zero input.
pub fn minmax_bias<T: Scalar>(format: FpFormat, max_abs: T) -> i32 {
    if max_abs == T::zero() {
        return 0;
    }
    let max_val = T::lit(format.max_val());
    let mut bias = max_abs.floor_log2() - max_val.floor_log2();
    // the mantissa comparison can only push the quotient one binade lower
    if max_val * T::exp2i(bias) > max_abs {
        bias -= 1;
    }
    bias
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_val_examples() {
        assert_eq!(FpFormat::E2M1.max_val(), 12.0);
        assert_eq!(FpFormat::E1M2.max_val(), 3.5);
        assert_eq!(FpFormat::E3M0.max_val(), 128.0);
        assert_eq!(FpFormat::E4M3.max_val(), 2f64.powi(15) * 1.875);
    }

    #[test]
    fn range_ratio_examples() {
        assert_eq!(FpFormat::E2M1.range_ratio(), 16.0);
        assert!((FpFormat::E1M2.range_ratio() - 5.6).abs() < 1e-12);
        assert_eq!(FpFormat::E3M0.range_ratio(), 128.0);
    }

    #[test]
    fn range_ratio_increases_with_exponent_bits() {
        for n in 2..=8 {
            let r: Vec<f64> = candidate_formats(n)
                .unwrap()
                .iter()
                .map(|f| f.range_ratio())
                .collect();
            assert!(r.windows(2).all(|w| w[0] < w[1]), "n = {n}: {r:?}");
        }
    }

    #[test]
    fn candidates() {
        assert_eq!(
            candidate_formats(4).unwrap(),
            vec![FpFormat::E1M2, FpFormat::E2M1, FpFormat::E3M0]
        );
        assert_eq!(
            candidate_formats(2).unwrap(),
            vec![FpFormat::new(1, 0).unwrap()]
        );
        let eight = candidate_formats(8).unwrap();
        assert_eq!(eight.len(), 7);
        assert_eq!(eight[0].to_string(), "E1M6");
        assert_eq!(eight[6].to_string(), "E7M0");
        assert!(candidate_formats(1).is_err());
    }

    #[test]
    fn e2m1_grids() {
        // the OCP FP4 magnitudes sit at bias -1
        let g: Vec<f64> = FpFormat::E2M1.with_bias(-1).grid();
        assert_eq!(g, vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0]);
        let g: Vec<f64> = FpFormat::E2M1.with_bias(0).grid();
        assert_eq!(g, vec![0.0, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0]);
        let g: Vec<f64> = FpFormat::E2M1.with_bias(-3).grid();
        assert_eq!(*g.last().unwrap(), 1.5);
    }

    #[test]
    fn grid_shape_properties() {
        for n in 2..=8 {
            for f in candidate_formats(n).unwrap() {
                for bias in [-5, -1, 0, 3] {
                    let bf = f.with_bias(bias);
                    let g: Vec<f64> = bf.grid();
                    assert_eq!(g[0], 0.0);
                    assert!(g.len() <= 1 << (n - 1), "{bf}: {} magnitudes", g.len());
                    assert_eq!(*g.last().unwrap(), bf.value_max::<f64>());
                    let gaps: Vec<f64> = g.windows(2).map(|w| w[1] - w[0]).collect();
                    assert!(gaps.iter().all(|&d| d > 0.0));
                    assert!(gaps.windows(2).all(|w| w[1] >= w[0]), "{bf}");
                    let sub = 1usize << f.man_bits();
                    assert!(gaps[..sub].iter().all(|&d| d == gaps[0]));
                }
            }
        }
    }

    #[test]
    fn round_examples() {
        let bf = FpFormat::E2M1.with_bias(0);
        assert_eq!(bf.round(0.0f64), 0.0);
        assert_eq!(bf.round(1000.0f64), 12.0);
        assert_eq!(bf.round(-1000.0f64), -12.0);
        assert_eq!(bf.round(2.4f64), 2.0);
        assert_eq!(bf.round(2.5f64), 3.0);
        assert_eq!(bf.round(-2.5f64), -3.0);
        assert_eq!(bf.round(0.6f64), 1.0);
        assert_eq!(bf.round(0.5f64), 1.0);
        assert_eq!(bf.round(0.49f64), 0.0);
        assert_eq!(bf.round(10.0f64), 12.0);
        assert_eq!(bf.round(9.9f64), 8.0);
    }

    #[test]
    fn minmax_bias_is_exact() {
        let f = FpFormat::E2M1;
        assert_eq!(minmax_bias(f, 12.0f64), 0);
        assert_eq!(minmax_bias(f, 23.99f64), 0);
        assert_eq!(minmax_bias(f, 24.0f64), 1);
        assert_eq!(minmax_bias(f, 11.99f64), -1);
        assert_eq!(minmax_bias(f, 6.0f64), -1);
        assert_eq!(minmax_bias(f, 0.0f64), 0);
        for k in -20..20 {
            let x = 12.0 * 2f64.powi(k);
            assert_eq!(minmax_bias(f, x), k);
            assert_eq!(minmax_bias(f, x * (1.0 - 1e-15)), k - 1);
        }
    }

    #[test]
    fn parse_formats() {
        assert_eq!("e2m1".parse::<FpFormat>().unwrap(), FpFormat::E2M1);
        assert_eq!("E4M3".parse::<FpFormat>().unwrap(), FpFormat::E4M3);
        assert!("E0M3".parse::<FpFormat>().is_err());
        assert!("M2E1".parse::<FpFormat>().is_err());
        assert!("E2".parse::<FpFormat>().is_err());
    }
}
