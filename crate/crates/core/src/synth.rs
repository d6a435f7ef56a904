//! Seeded synthetic weights and activations.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::block::{DiTBlockWeights, LayerNorm};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_from<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(rows, cols, |_, _| {
        T::lit(rng.sample::<f64, _>(StandardNormal))
    })
}

/// Unit Gaussian `rows x cols` matrix.
pub fn gaussian<T: Scalar>(rows: usize, cols: usize, seed: u64) -> Tensor<T> {
    gaussian_from(rows, cols, &mut rng(seed))
}

/// Gaussian `in x out` projection scaled by `1/sqrt(in)`; a `heavy_tail`
/// fraction of entries is inflated 8x to widen the magnitude spread.
fn projection<T: Scalar>(
    rows: usize,
    cols: usize,
    heavy_tail: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let scale = 1.0 / (rows as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        let boost = if heavy_tail > 0.0 && rng.gen_bool(heavy_tail.min(1.0)) {
            8.0
        } else {
            1.0
        };
        T::lit(z * scale * boost)
    })
}

pub fn random_block<T: Scalar>(
    n: usize,
    heads: usize,
    seed: u64,
    heavy_tail: f64,
) -> DiTBlockWeights<T> {
    let mut r = rng(seed);
    let hidden = 4 * n;
    let norm = |r: &mut ChaCha8Rng| LayerNorm {
        gamma: (0..n)
            .map(|_| T::lit(1.0 + 0.1 * r.sample::<f64, _>(StandardNormal)))
            .collect(),
        beta: (0..n)
            .map(|_| T::lit(0.1 * r.sample::<f64, _>(StandardNormal)))
            .collect(),
    };
    let ln1 = norm(&mut r);
    let ln2 = norm(&mut r);
    DiTBlockWeights {
        w_q: projection(n, n, heavy_tail, &mut r),
        w_k: projection(n, n, heavy_tail, &mut r),
        w_v: projection(n, n, heavy_tail, &mut r),
        w_out: projection(n, n, heavy_tail, &mut r),
        w_fc1: projection(n, hidden, heavy_tail, &mut r),
        w_fc2: projection(hidden, n, heavy_tail, &mut r),
        ln1,
        ln2,
        heads,
    }
}

/// Unit-Gaussian `tokens x n` activations in which `outlier_channels`
/// randomly chosen columns are multiplied by `outlier_scale`.
pub fn gen_activations<T: Scalar>(
    tokens: usize,
    n: usize,
    outlier_channels: usize,
    outlier_scale: f64,
    seed: u64,
) -> Result<Tensor<T>> {
    if outlier_channels > n {
        return Err(Error::param(format!(
            "{outlier_channels} outlier channels requested for {n} channels"
        )));
    }
    let mut r = rng(seed);
    let picked = sample(&mut r, n, outlier_channels).into_vec();
    let mut scale = vec![1.0; n];
    for c in picked {
        scale[c] = outlier_scale;
    }
    Ok(Tensor::from_fn(tokens, n, |_, j| {
        T::lit(r.sample::<f64, _>(StandardNormal) * scale[j])
    }))
}
