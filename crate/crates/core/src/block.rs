//! Single transformer block (self-attention + GELU feed-forward, pre-norm
//! residual) with hook points at every linear-layer input.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hadamard::{HadamardSpec, OpCount};
use crate::io::TensorMap;
use crate::scalar::Scalar;
use crate::tensor::{matmul, Tensor};

/// The six quantizable projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linear {
    Q,
    K,
    V,
    Out,
    Fc1,
    Fc2,
}

impl Linear {
    pub const ALL: [Linear; 6] = [
        Linear::Q,
        Linear::K,
        Linear::V,
        Linear::Out,
        Linear::Fc1,
        Linear::Fc2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Linear::Q => "w_q",
            Linear::K => "w_k",
            Linear::V => "w_v",
            Linear::Out => "w_out",
            Linear::Fc1 => "w_fc1",
            Linear::Fc2 => "w_fc2",
        }
    }

    /// Activation site feeding this projection.
    pub fn site(self) -> Site {
        match self {
            Linear::Q | Linear::K | Linear::V => Site::AttnInput,
            Linear::Out => Site::AttnOutput,
            Linear::Fc1 => Site::FfnInput,
            Linear::Fc2 => Site::FfnHidden,
        }
    }
}

impl fmt::Display for Linear {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Points in the forward pass where an activation enters a projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Normalized block input, shared by the Q/K/V projections.
    AttnInput,
    /// Concatenated per-head attention output, input of `W_out`.
    AttnOutput,
    /// Normalized residual stream, input of `W_fc1`.
    FfnInput,
    /// GELU output, input of `W_fc2`.
    FfnHidden,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub const EPS: f64 = 1e-6;

    pub fn identity(n: usize) -> Self {
        Self {
            gamma: vec![T::one(); n],
            beta: vec![T::zero(); n],
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.cols();
        let nf = T::lit(n as f64);
        let mut data = Vec::with_capacity(x.numel());
        for row in x.rows_iter() {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + T::lit(Self::EPS)).sqrt();
            for (j, &v) in row.iter().enumerate() {
                data.push((v - mean) * inv * self.gamma[j] + self.beta[j]);
            }
        }
        Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
    }
}

/// Weights of one block. Projections are stored `in_dim x out_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiTBlockWeights<T: Scalar> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_out: Tensor<T>,
    pub w_fc1: Tensor<T>,
    pub w_fc2: Tensor<T>,
    pub ln1: LayerNorm<T>,
    pub ln2: LayerNorm<T>,
    pub heads: usize,
}

impl<T: Scalar> DiTBlockWeights<T> {
    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_fc1.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn get(&self, l: Linear) -> &Tensor<T> {
        match l {
            Linear::Q => &self.w_q,
            Linear::K => &self.w_k,
            Linear::V => &self.w_v,
            Linear::Out => &self.w_out,
            Linear::Fc1 => &self.w_fc1,
            Linear::Fc2 => &self.w_fc2,
        }
    }

    pub fn get_mut(&mut self, l: Linear) -> &mut Tensor<T> {
        match l {
            Linear::Q => &mut self.w_q,
            Linear::K => &mut self.w_k,
            Linear::V => &mut self.w_v,
            Linear::Out => &mut self.w_out,
            Linear::Fc1 => &mut self.w_fc1,
            Linear::Fc2 => &mut self.w_fc2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.heads == 0 || !n.is_multiple_of(self.heads) {
            return Err(Error::param(format!(
                "embedding dim {n} not divisible by {} heads",
                self.heads
            )));
        }
        let hidden = self.hidden();
        let want = [
            (Linear::Q, [n, n]),
            (Linear::K, [n, n]),
            (Linear::V, [n, n]),
            (Linear::Out, [n, n]),
            (Linear::Fc1, [n, hidden]),
            (Linear::Fc2, [hidden, n]),
        ];
        for (l, shape) in want {
            let w = self.get(l);
            if w.shape() != shape {
                return Err(Error::Dimension {
                    op: l.name(),
                    lhs: w.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            if !w.is_finite() {
                return Err(Error::Data(format!("{l} holds non-finite values")));
            }
        }
        for ln in [&self.ln1, &self.ln2] {
            if ln.gamma.len() != n || ln.beta.len() != n {
                return Err(Error::Dimension {
                    op: "layer norm",
                    lhs: vec![ln.gamma.len(), ln.beta.len()],
                    rhs: vec![n],
                });
            }
        }
        Ok(())
    }

    pub fn to_tensor_map(&self) -> TensorMap<T> {
        let mut m = TensorMap::new();
        for l in Linear::ALL {
            m.insert(l.name().to_owned(), self.get(l).clone());
        }
        m.insert("ln1.gamma".into(), Tensor::vector(self.ln1.gamma.clone()));
        m.insert("ln1.beta".into(), Tensor::vector(self.ln1.beta.clone()));
        m.insert("ln2.gamma".into(), Tensor::vector(self.ln2.gamma.clone()));
        m.insert("ln2.beta".into(), Tensor::vector(self.ln2.beta.clone()));
        m
    }

    /// Inverse of [`to_tensor_map`](Self::to_tensor_map). Layer-norm entries
    /// are optional and default to the identity normalization.
    pub fn from_tensor_map(m: &TensorMap<T>, heads: usize) -> Result<Self> {
        let take = |name: &str| -> Result<Tensor<T>> {
            m.get(name)
                .cloned()
                .ok_or_else(|| Error::param(format!("weights file lacks tensor {name:?}")))
        };
        let w_q = take("w_q")?;
        let n = w_q.rows();
        let vec_or = |name: &str, fill: T| -> Vec<T> {
            m.get(name)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![fill; n])
        };
        let w = Self {
            w_q,
            w_k: take("w_k")?,
            w_v: take("w_v")?,
            w_out: take("w_out")?,
            w_fc1: take("w_fc1")?,
            w_fc2: take("w_fc2")?,
            ln1: LayerNorm {
                gamma: vec_or("ln1.gamma", T::one()),
                beta: vec_or("ln1.beta", T::zero()),
            },
            ln2: LayerNorm {
                gamma: vec_or("ln2.gamma", T::one()),
                beta: vec_or("ln2.beta", T::zero()),
            },
            heads,
        };
        w.validate()?;
        Ok(w)
    }
}

/// Hadamard transforms executed at run time, in working precision.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OnlineSchedule {
    /// Applied to both normalized inputs (attention and feed-forward).
    pub input: Option<HadamardSpec>,
    /// `H_h ⊗ I_d` across heads on the attention output.
    pub head_mix: Option<HadamardSpec>,
    /// Applied to the GELU output.
    pub hidden: Option<HadamardSpec>,
}

impl OnlineSchedule {
    pub fn none() -> Self {
        Self::default()
    }

    /// Operation count of one forward pass over `tokens` rows.
    pub fn op_count(&self, tokens: usize, dim: usize, hidden: usize) -> Result<OpCount> {
        let mut total = OpCount::default();
        if let Some(h) = &self.input {
            let one = h.op_count(tokens, dim)?;
            total = total + one + one;
        }
        if let Some(h) = &self.head_mix {
            total = total + h.op_count(tokens, dim)?;
        }
        if let Some(h) = &self.hidden {
            total = total + h.op_count(tokens, hidden)?;
        }
        Ok(total)
    }
}

/// Exact GELU, `x Φ(x)`.
pub fn gelu<T: Scalar>(x: T) -> T {
    let v = x.as_f64();
    T::lit(0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2)))
}

fn softmax_rows<T: Scalar>(s: &mut Tensor<T>) {
    let cols = s.cols();
    let mut data = std::mem::replace(s, Tensor::zeros(&[1])).into_data();
    for row in data.chunks_exact_mut(cols) {
        let top = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - top).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    *s = Tensor::matrix(data.len() / cols, cols, data).expect("shape preserved");
}

/// Multi-head scaled dot-product attention on already projected Q, K, V.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let d = q.cols() / heads;
    let scale = T::one() / T::lit(d as f64).sqrt();
    let parts = (0..heads)
        .map(|h| {
            let qh = q.column_block(h * d, d);
            let kh = k.column_block(h * d, d);
            let vh = v.column_block(h * d, d);
            let mut scores = matmul(&qh, &kh.transpose())?.scale(scale);
            softmax_rows(&mut scores);
            matmul(&scores, &vh)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::hconcat(&parts)
}

/// Block forward pass for one token sequence `x (tokens x n)`.
///
/// `at_site` receives each projection input after any online transform and
/// returns the tensor actually fed to the projection (identity for the
/// full-precision path, fake-quantized for the quantized path).
pub fn forward<T: Scalar>(
    x: &Tensor<T>,
    w: &DiTBlockWeights<T>,
    online: &OnlineSchedule,
    at_site: &mut dyn FnMut(Site, Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let (_, n) = x.require_matrix("block forward")?;
    if n != w.dim() {
        return Err(Error::Dimension {
            op: "block forward",
            lhs: x.shape().to_vec(),
            rhs: w.w_q.shape().to_vec(),
        });
    }
    let rotate = |t: Tensor<T>, spec: &Option<HadamardSpec>| -> Result<Tensor<T>> {
        match spec {
            Some(h) => h.apply_right(&t),
            None => Ok(t),
        }
    };

    let h1 = rotate(w.ln1.apply(x), &online.input)?;
    let h1 = at_site(Site::AttnInput, h1)?;
    let q = matmul(&h1, &w.w_q)?;
    let k = matmul(&h1, &w.w_k)?;
    let v = matmul(&h1, &w.w_v)?;
    let mut o = attention(&q, &k, &v, w.heads)?;
    if let Some(hh) = &online.head_mix {
        o = hh.apply_right_blocks(&o, w.head_dim())?.0;
    }
    let o = at_site(Site::AttnOutput, o)?;
    let x1 = x.add(&matmul(&o, &w.w_out)?)?;

    let h2 = rotate(w.ln2.apply(&x1), &online.input)?;
    let h2 = at_site(Site::FfnInput, h2)?;
    let g = matmul(&h2, &w.w_fc1)?.map(gelu);
    let g = rotate(g, &online.hidden)?;
    let g = at_site(Site::FfnHidden, g)?;
    x1.add(&matmul(&g, &w.w_fc2)?)
}

/// Full-precision forward pass with no hooks.
pub fn forward_plain<T: Scalar>(
    x: &Tensor<T>,
    w: &DiTBlockWeights<T>,
    online: &OnlineSchedule,
) -> Result<Tensor<T>> {
    forward(x, w, online, &mut |_, t| Ok(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((gelu(-1.0f64) + 0.158_655_253_931_457_05).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Tensor::matrix(2, 4, vec![1.0f64, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]).unwrap();
        let y = LayerNorm::identity(4).apply(&x);
        for row in y.rows_iter() {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_rows_average_values() {
        // identical keys give uniform attention
        let q = Tensor::from_fn(3, 4, |i, j| (i + j) as f64);
        let k = Tensor::from_fn(3, 4, |_, _| 1.0f64);
        let v = Tensor::from_fn(3, 4, |i, j| (i * 4 + j) as f64);
        let o = attention(&q, &k, &v, 2).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((o.at(i, j) - (4.0 + j as f64)).abs() < 1e-12);
            }
        }
    }
}
