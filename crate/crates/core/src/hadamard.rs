//! Normalized Hadamard matrices of order `n = p * q` and their fast
//! application.
//!
//! `H_n = (H_p ⊗ H_q) D / sqrt(n)` where `H_p` is the Sylvester matrix of a
//! power of two, `H_q` is one of a small set of base matrices and `D` is an
//! optional seeded ±1 diagonal. `X H` is computed row by row: a dense pass of
//! `H_q` over each contiguous `q`-block, an in-place butterfly over the `p`
//! blocks, then one scaling multiply per element.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{kron, Tensor};

/// Base orders with a built-in Hadamard matrix.
pub const SUPPORTED_BASE_ORDERS: &[usize] = &[1, 2, 4, 12, 20, 28];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HadamardSpec {
    n: usize,
    p: usize,
    q: usize,
    seed: Option<u64>,
    /// `q x q` row-major ±1 entries.
    base: Vec<i8>,
    /// Diagonal of `D`; empty when unseeded.
    signs: Vec<i8>,
}

/// Additions/subtractions and multiplications performed by a transform.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OpCount {
    pub adds: u64,
    pub muls: u64,
}

impl std::ops::Add for OpCount {
    type Output = OpCount;

    fn add(self, rhs: Self) -> Self {
        OpCount {
            adds: self.adds + rhs.adds,
            muls: self.muls + rhs.muls,
        }
    }
}

/// Splits `n` into `p * q` with `p` the largest power of two leaving a
/// supported base order `q`.
pub fn factor_order(n: usize) -> Result<(usize, usize)> {
    let unsupported = Error::UnsupportedOrder {
        n,
        supported: SUPPORTED_BASE_ORDERS,
    };
    if n == 0 {
        return Err(unsupported);
    }
    let mut p = 1usize << n.trailing_zeros();
    while p >= 1 {
        let q = n / p;
        if SUPPORTED_BASE_ORDERS.contains(&q) {
            return Ok((p, q));
        }
        p /= 2;
    }
    Err(unsupported)
}

fn legendre(a: usize, prime: usize) -> i8 {
    let a = a % prime;
    if a == 0 {
        return 0;
    }
    let is_residue = (1..prime).any(|x| x * x % prime == a);
    if is_residue {
        1
    } else {
        -1
    }
}

/// Jacobsthal matrix `Q[i][j] = chi(j - i)` over the prime field.
fn jacobsthal(prime: usize) -> Vec<Vec<i8>> {
    (0..prime)
        .map(|i| (0..prime).map(|j| legendre(j + prime - i, prime)).collect())
        .collect()
}

/// Paley I, order `prime + 1` for `prime ≡ 3 (mod 4)`: `H = I + S` with
/// `S = [[0, 1ᵀ], [-1, Q]]` skew-symmetric.
fn paley_one(prime: usize) -> Vec<i8> {
    let q = jacobsthal(prime);
    let n = prime + 1;
    let mut h = vec![0i8; n * n];
    for i in 0..n {
        for j in 0..n {
            let s = match (i, j) {
                (0, 0) => 0,
                (0, _) => 1,
                (_, 0) => -1,
                _ => q[i - 1][j - 1],
            };
            h[i * n + j] = s + i8::from(i == j);
        }
    }
    h
}

/// Paley II, order `2 (prime + 1)` for `prime ≡ 1 (mod 4)`: each entry of
/// the symmetric conference matrix `C = [[0, 1ᵀ], [1, Q]]` becomes a 2x2
/// block, `±[[1, 1], [1, -1]]` off the diagonal and `[[1, -1], [-1, -1]]` on it.
fn paley_two(prime: usize) -> Vec<i8> {
    let q = jacobsthal(prime);
    let c = prime + 1;
    let n = 2 * c;
    let mut h = vec![0i8; n * n];
    for i in 0..c {
        for j in 0..c {
            let cij = match (i, j) {
                (0, 0) => 0,
                (0, _) | (_, 0) => 1,
                _ => q[i - 1][j - 1],
            };
            let block: [[i8; 2]; 2] = if cij == 0 {
                [[1, -1], [-1, -1]]
            } else {
                [[cij, cij], [cij, -cij]]
            };
            for (a, row) in block.iter().enumerate() {
                for (b, &v) in row.iter().enumerate() {
                    h[(2 * i + a) * n + 2 * j + b] = v;
                }
            }
        }
    }
    h
}

fn sylvester_i8(n: usize) -> Vec<i8> {
    let mut h = vec![1i8];
    let mut size = 1;
    while size < n {
        let next = 2 * size;
        let mut g = vec![0i8; next * next];
        for i in 0..size {
            for j in 0..size {
                let v = h[i * size + j];
                g[i * next + j] = v;
                g[i * next + j + size] = v;
                g[(i + size) * next + j] = v;
                g[(i + size) * next + j + size] = -v;
            }
        }
        h = g;
        size = next;
    }
    h
}

fn base_matrix(q: usize) -> Vec<i8> {
    match q {
        1 | 2 | 4 => sylvester_i8(q),
        12 => paley_one(11),
        20 => paley_one(19),
        28 => paley_two(13),
        _ => unreachable!("factor_order only yields supported base orders"),
    }
}

/// Unnormalized Sylvester matrix of a power-of-two order, built by the
/// block recursion `[[H, H], [H, -H]]`.
pub fn sylvester<T: Scalar>(n: usize) -> Tensor<T> {
    assert!(
        n.is_power_of_two(),
        "Sylvester order must be a power of two"
    );
    let h = sylvester_i8(n);
    Tensor::from_fn(n, n, |i, j| T::lit(h[i * n + j] as f64))
}

impl HadamardSpec {
    /// Normalized order-`n` Hadamard matrix, optionally post-multiplied by a
    /// ±1 diagonal drawn from `seed`.
    pub fn build(n: usize, seed: Option<u64>) -> Result<Self> {
        let (p, q) = factor_order(n)?;
        let signs = match seed {
            Some(s) => {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                (0..n)
                    .map(|_| if rng.gen_bool(0.5) { 1 } else { -1 })
                    .collect()
            }
            None => Vec::new(),
        };
        Ok(Self {
            n,
            p,
            q,
            seed,
            base: base_matrix(q),
            signs,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Unnormalized `q x q` base matrix.
    pub fn base<T: Scalar>(&self) -> Tensor<T> {
        let q = self.q;
        Tensor::from_fn(q, q, |i, j| T::lit(self.base[i * q + j] as f64))
    }

    fn sign(&self, j: usize) -> i8 {
        if self.signs.is_empty() {
            1
        } else {
            self.signs[j]
        }
    }

    /// Dense `n x n` matrix, built from an explicit Kronecker product.
    pub fn realize<T: Scalar>(&self) -> Tensor<T> {
        let k = kron(&sylvester::<T>(self.p), &self.base::<T>());
        let norm = T::one() / T::lit(self.n as f64).sqrt();
        Tensor::from_fn(self.n, self.n, |i, j| {
            k.at(i, j) * norm * T::lit(self.sign(j) as f64)
        })
    }

    /// `X H` for `X` with `n` columns.
    pub fn apply_right<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.apply_right_counted(x)?.0)
    }

    /// `X H` together with the operations actually executed.
    pub fn apply_right_counted<T: Scalar>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, OpCount)> {
        self.run(x, 1, false)
    }

    /// `X Hᵀ`.
    pub fn apply_right_transposed<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x, 1, true)?.0)
    }

    /// `X (H ⊗ I_inner)`: mixes `inner`-wide column blocks, e.g. attention
    /// heads, without touching positions within a block.
    pub fn apply_right_blocks<T: Scalar>(
        &self,
        x: &Tensor<T>,
        inner: usize,
    ) -> Result<(Tensor<T>, OpCount)> {
        self.run(x, inner, false)
    }

    /// `Hᵀ W`.
    pub fn apply_left_transposed<T: Scalar>(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.apply_right(&w.transpose())?.transpose())
    }

    /// `H W`.
    pub fn apply_left<T: Scalar>(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.apply_right_transposed(&w.transpose())?.transpose())
    }

    /// Operation count of `X (H ⊗ I)` for an `m x n_cols` input, where
    /// `n_cols` is a multiple of the order:
    ///
    /// * adds = m·n_cols·log2(p) (butterflies) + m·n_cols·(q−1) (dense base stage)
    /// * muls = m·n_cols (scaling) + m·n_cols·q (dense base stage, only when q > 1)
    pub fn op_count(&self, m: usize, n_cols: usize) -> Result<OpCount> {
        if n_cols == 0 || !n_cols.is_multiple_of(self.n) {
            return Err(Error::Dimension {
                op: "op_count",
                lhs: vec![m, n_cols],
                rhs: vec![self.n],
            });
        }
        let elems = (m * n_cols) as u64;
        let log_p = self.p.trailing_zeros() as u64;
        let q = self.q as u64;
        let dense = if q > 1 { elems * q } else { 0 };
        Ok(OpCount {
            adds: elems * log_p + elems * (q - 1),
            muls: elems + dense,
        })
    }

    fn run<T: Scalar>(
        &self,
        x: &Tensor<T>,
        inner: usize,
        transposed: bool,
    ) -> Result<(Tensor<T>, OpCount)> {
        let cols = self.n * inner;
        if x.ndim() != 2 || x.cols() != cols {
            return Err(Error::Dimension {
                op: "hadamard transform",
                lhs: x.shape().to_vec(),
                rhs: vec![self.n, self.n],
            });
        }
        let norm = T::one() / T::lit(self.n as f64).sqrt();
        let scale: Vec<T> = (0..self.n)
            .map(|j| norm * T::lit(self.sign(j) as f64))
            .collect();
        let mut data = x.data().to_vec();
        let mut ops = OpCount::default();
        let mut gather = vec![T::zero(); self.q];
        for row in data.chunks_exact_mut(cols) {
            if transposed {
                // Hᵀ = D (H_p ⊗ H_qᵀ) / sqrt(n): the diagonal acts first
                self.scale_row(row, inner, &scale, &mut ops);
                self.base_stage(row, inner, true, &mut gather, &mut ops);
                self.butterflies(row, inner, &mut ops);
            } else {
                self.base_stage(row, inner, false, &mut gather, &mut ops);
                self.butterflies(row, inner, &mut ops);
                self.scale_row(row, inner, &scale, &mut ops);
            }
        }
        Ok((Tensor::new(x.shape().to_vec(), data)?, ops))
    }

    /// Dense `H_q` over every q-group (stride `inner`).
    fn base_stage<T: Scalar>(
        &self,
        row: &mut [T],
        inner: usize,
        transposed: bool,
        gather: &mut [T],
        ops: &mut OpCount,
    ) {
        let q = self.q;
        if q == 1 {
            return;
        }
        let coeff = |a: usize, b: usize| -> T {
            let v = if transposed {
                self.base[b * q + a]
            } else {
                self.base[a * q + b]
            };
            T::lit(v as f64)
        };
        for ip in 0..self.p {
            for k in 0..inner {
                let at = |a: usize| (ip * q + a) * inner + k;
                for (a, g) in gather.iter_mut().enumerate() {
                    *g = row[at(a)];
                }
                for b in 0..q {
                    let mut acc = gather[0] * coeff(0, b);
                    ops.muls += 1;
                    for (a, &g) in gather.iter().enumerate().skip(1) {
                        acc = acc + g * coeff(a, b);
                        ops.muls += 1;
                        ops.adds += 1;
                    }
                    row[at(b)] = acc;
                }
            }
        }
    }

    /// In-place Walsh-Hadamard butterflies across the `p` groups.
    fn butterflies<T: Scalar>(&self, row: &mut [T], inner: usize, ops: &mut OpCount) {
        let group = self.q * inner;
        let mut half = 1;
        while half < self.p {
            for start in (0..self.p).step_by(2 * half) {
                for i in start..start + half {
                    let lo = i * group;
                    let hi = (i + half) * group;
                    for t in 0..group {
                        let a = row[lo + t];
                        let b = row[hi + t];
                        row[lo + t] = a + b;
                        row[hi + t] = a - b;
                        ops.adds += 2;
                    }
                }
            }
            half *= 2;
        }
    }

    fn scale_row<T: Scalar>(&self, row: &mut [T], inner: usize, scale: &[T], ops: &mut OpCount) {
        for (i, v) in row.iter_mut().enumerate() {
            *v = *v * scale[i / inner];
            ops.muls += 1;
        }
    }
}

/// Max-norm distance of `M Mᵀ` from the identity.
pub fn orthogonality_error<T: Scalar>(m: &Tensor<T>) -> T {
    let g = m.matmul(&m.transpose()).expect("square matrix");
    g.max_abs_diff(&Tensor::identity(m.rows()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn factorizations() {
        assert_eq!(factor_order(1).unwrap(), (1, 1));
        assert_eq!(factor_order(64).unwrap(), (64, 1));
        assert_eq!(factor_order(24).unwrap(), (2, 12));
        assert_eq!(factor_order(48).unwrap(), (4, 12));
        assert_eq!(factor_order(56).unwrap(), (2, 28));
        assert_eq!(factor_order(28672).unwrap(), (1024, 28));
        assert_eq!(factor_order(12).unwrap(), (1, 12));
        assert_eq!(factor_order(40).unwrap(), (2, 20));
        for bad in [0, 3, 6, 36, 44] {
            let err = factor_order(bad).unwrap_err().to_string();
            assert!(err.contains("12, 20, 28"), "{err}");
        }
    }

    #[test]
    fn base_matrices_are_hadamard() {
        for &q in SUPPORTED_BASE_ORDERS {
            let raw = base_matrix(q);
            let b = Tensor::from_fn(q, q, |i, j| raw[i * q + j] as f64);
            assert!(b.data().iter().all(|v| v.abs() == 1.0));
            let g = b.matmul(&b.transpose()).unwrap();
            assert_eq!(g, Tensor::identity(q).scale(q as f64), "order {q}");
        }
    }

    #[test]
    fn order_two() {
        let h = HadamardSpec::build(2, None).unwrap().realize::<f64>();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for (got, want) in h.data().iter().zip([s, s, s, -s]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn dense_realizations_are_orthogonal() {
        for n in [1, 2, 4, 8, 12, 20, 24, 28, 48, 56, 64, 112] {
            for seed in [None, Some(9)] {
                let m = HadamardSpec::build(n, seed).unwrap().realize::<f64>();
                assert!(orthogonality_error(&m) <= 1e-12, "n = {n}");
            }
        }
    }

    #[test]
    fn fast_matches_dense() {
        for n in [4, 8, 16, 24, 48, 56] {
            for seed in [None, Some(3)] {
                let h = HadamardSpec::build(n, seed).unwrap();
                let x = random(16, n, n as u64);
                let fast = h.apply_right(&x).unwrap();
                let dense = x.matmul(&h.realize()).unwrap();
                assert!(fast.max_abs_diff(&dense) <= 1e-10 * dense.max_abs());
                let fast_t = h.apply_right_transposed(&x).unwrap();
                let dense_t = x.matmul(&h.realize::<f64>().transpose()).unwrap();
                assert!(fast_t.max_abs_diff(&dense_t) <= 1e-10 * dense_t.max_abs());
            }
        }
    }

    #[test]
    fn ones_vector() {
        let h = HadamardSpec::build(4, None).unwrap();
        let y = h
            .apply_right(&Tensor::matrix(1, 4, vec![1.0f64; 4]).unwrap())
            .unwrap();
        assert_eq!(y.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn unit_row_spreads_evenly() {
        for n in [8, 12, 24, 28] {
            let h = HadamardSpec::build(n, Some(1)).unwrap();
            let mut e = Tensor::<f64>::zeros(&[1, n]);
            let mut d = e.clone().into_data();
            d[0] = 1.0;
            e = Tensor::matrix(1, n, d).unwrap();
            let y = h.apply_right(&e).unwrap();
            let mag = 1.0 / (n as f64).sqrt();
            assert!(y.data().iter().all(|v| (v.abs() - mag).abs() < 1e-15));
        }
    }

    #[test]
    fn block_application_matches_kron_identity() {
        let h = HadamardSpec::build(4, Some(5)).unwrap();
        let x = random(3, 12, 1);
        let (fast, ops) = h.apply_right_blocks(&x, 3).unwrap();
        let dense = x.matmul(&kron(&h.realize(), &Tensor::identity(3))).unwrap();
        assert!(fast.max_abs_diff(&dense) < 1e-14);
        assert_eq!(ops, h.op_count(3, 12).unwrap());
    }

    #[test]
    fn left_applications() {
        let h = HadamardSpec::build(12, Some(2)).unwrap();
        let w = random(12, 5, 4);
        let dense = h.realize::<f64>();
        let left = h.apply_left(&w).unwrap();
        assert!(left.max_abs_diff(&dense.matmul(&w).unwrap()) < 1e-13);
        let left_t = h.apply_left_transposed(&w).unwrap();
        assert!(left_t.max_abs_diff(&dense.transpose().matmul(&w).unwrap()) < 1e-13);
        let back = h.apply_left(&left_t).unwrap();
        assert!(back.max_abs_diff(&w) < 1e-13);
    }

    #[test]
    fn measured_counts_match_formula() {
        for (m, n) in [(1, 2), (3, 8), (5, 64), (2, 24), (4, 56), (2, 20)] {
            let h = HadamardSpec::build(n, None).unwrap();
            let (_, ops) = h.apply_right_counted(&random(m, n, 0)).unwrap();
            assert_eq!(ops, h.op_count(m, n).unwrap(), "m = {m}, n = {n}");
        }
        let h = HadamardSpec::build(2, None).unwrap();
        assert_eq!(h.op_count(1, 2).unwrap().adds, 2);
        let h = HadamardSpec::build(256, None).unwrap();
        assert_eq!(
            h.op_count(128, 256).unwrap(),
            OpCount {
                adds: 128 * 256 * 8,
                muls: 128 * 256
            }
        );
    }

    #[test]
    fn dimension_mismatch() {
        let h = HadamardSpec::build(8, None).unwrap();
        assert!(h.apply_right(&Tensor::<f64>::zeros(&[2, 4])).is_err());
        assert!(h.op_count(2, 12).is_err());
    }
}
