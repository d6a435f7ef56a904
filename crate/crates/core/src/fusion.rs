//! Offline folding of Hadamard rotations into block weights and the
//! matching online transform schedule.
//!
//! With `X' = X H` online, `W' = Hᵀ W` offline keeps `X' W' = X W`. The
//! value path uses `H_head = (I ⊗ H_d)(H_h ⊗ I) = H_h ⊗ H_d`. In
//! [`VMode::PerHeadExact`] only the per-head factor `I ⊗ H_d` is folded into
//! `W_v` (it commutes with per-head attention), the cross-head factor
//! `H_h ⊗ I` runs online after concatenation, and `H_headᵀ` is folded into
//! `W_out`. [`VMode::Literal`] folds the whole `H_head` into `W_v`
//! with no online step, which mixes heads before attention and is only
//! exact for a single head.

use serde::{Deserialize, Serialize};

use crate::block::{DiTBlockWeights, OnlineSchedule, Site};
use crate::error::{Error, Result};
use crate::hadamard::HadamardSpec;
use crate::scalar::Scalar;
use crate::tensor::{kron, matmul, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum VMode {
    #[default]
    #[serde(rename = "exact")]
    PerHeadExact,
    #[serde(rename = "literal")]
    Literal,
}

impl std::str::FromStr for VMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(VMode::PerHeadExact),
            "literal" => Ok(VMode::Literal),
            _ => Err(Error::param(format!(
                "v-mode must be exact or literal, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionPlan {
    pub input: HadamardSpec,
    pub hidden: HadamardSpec,
    pub head_d: HadamardSpec,
    pub head_h: HadamardSpec,
    pub v_mode: VMode,
}

impl FusionPlan {
    /// Plan for embedding dim `n`, `heads` heads and a `4n` hidden layer. A
    /// seed randomizes the signs of every rotation (distinct derived seeds).
    pub fn new(n: usize, heads: usize, v_mode: VMode, seed: Option<u64>) -> Result<Self> {
        if heads == 0 || !n.is_multiple_of(heads) {
            return Err(Error::param(format!(
                "embedding dim {n} not divisible by {heads} heads"
            )));
        }
        let derive = |k: u64| seed.map(|s| s.wrapping_mul(4).wrapping_add(k));
        Ok(Self {
            input: HadamardSpec::build(n, derive(0))?,
            hidden: HadamardSpec::build(4 * n, derive(1))?,
            head_d: HadamardSpec::build(n / heads, derive(2))?,
            head_h: HadamardSpec::build(heads, derive(3))?,
            v_mode,
        })
    }

    pub fn for_weights<T: Scalar>(
        w: &DiTBlockWeights<T>,
        v_mode: VMode,
        seed: Option<u64>,
    ) -> Result<Self> {
        let plan = Self::new(w.dim(), w.heads, v_mode, seed)?;
        plan.check(w)?;
        Ok(plan)
    }

    fn check<T: Scalar>(&self, w: &DiTBlockWeights<T>) -> Result<()> {
        let heads = self.head_h.n();
        let ok = self.input.n() == w.dim()
            && self.hidden.n() == w.hidden()
            && heads == w.heads
            && self.head_d.n() * heads == w.dim();
        if !ok {
            return Err(Error::Dimension {
                op: "fusion plan",
                lhs: vec![self.input.n(), self.hidden.n(), heads, self.head_d.n()],
                rhs: vec![w.dim(), w.hidden(), w.heads, w.head_dim()],
            });
        }
        Ok(())
    }

    /// Dense `H_head = (I_h ⊗ H_d)(H_h ⊗ I_d)`.
    pub fn head_matrix<T: Scalar>(&self) -> Tensor<T> {
        let h = self.head_h.n();
        let d = self.head_d.n();
        let per_head = kron(&Tensor::identity(h), &self.head_d.realize());
        let across = kron(&self.head_h.realize(), &Tensor::identity(d));
        matmul(&per_head, &across).expect("square factors")
    }
}

/// `X (I_h ⊗ H_d)`: the per-head rotation, as a rotation of each
/// `d`-wide column block.
fn per_head_rotate<T: Scalar>(x: &Tensor<T>, head_d: &HadamardSpec) -> Result<Tensor<T>> {
    let (rows, cols) = x.require_matrix("per-head rotation")?;
    let d = head_d.n();
    let blocks = x.clone().reshape(vec![rows * cols / d, d])?;
    head_d.apply_right(&blocks)?.reshape(vec![rows, cols])
}

/// Folds `Hᵀ` into the projections that read the normalized block input.
pub fn fuse_input<T: Scalar>(
    w: &DiTBlockWeights<T>,
    plan: &FusionPlan,
) -> Result<DiTBlockWeights<T>> {
    plan.check(w)?;
    let h = &plan.input;
    let mut out = w.clone();
    out.w_q = h.apply_left_transposed(&w.w_q)?;
    out.w_k = h.apply_left_transposed(&w.w_k)?;
    out.w_v = h.apply_left_transposed(&w.w_v)?;
    out.w_fc1 = h.apply_left_transposed(&w.w_fc1)?;
    Ok(out)
}

/// Inverse of [`fuse_input`]: folds `H` back in.
pub fn unfuse_input<T: Scalar>(
    w: &DiTBlockWeights<T>,
    plan: &FusionPlan,
) -> Result<DiTBlockWeights<T>> {
    plan.check(w)?;
    let h = &plan.input;
    let mut out = w.clone();
    out.w_q = h.apply_left(&w.w_q)?;
    out.w_k = h.apply_left(&w.w_k)?;
    out.w_v = h.apply_left(&w.w_v)?;
    out.w_fc1 = h.apply_left(&w.w_fc1)?;
    Ok(out)
}

/// Folds the head rotation into `W_v` and `W_out` per `plan.v_mode`.
pub fn fuse_v_out<T: Scalar>(
    w: &DiTBlockWeights<T>,
    plan: &FusionPlan,
) -> Result<DiTBlockWeights<T>> {
    plan.check(w)?;
    let head = plan.head_matrix::<T>();
    let mut out = w.clone();
    out.w_v = match plan.v_mode {
        VMode::PerHeadExact => per_head_rotate(&w.w_v, &plan.head_d)?,
        VMode::Literal => matmul(&w.w_v, &head)?,
    };
    out.w_out = matmul(&head.transpose(), &w.w_out)?;
    Ok(out)
}

/// Online rotation `H_h ⊗ I_d` of the concatenated attention output, if the
/// plan needs one.
pub fn head_mix_online(plan: &FusionPlan) -> Option<HadamardSpec> {
    (plan.v_mode == VMode::PerHeadExact && plan.head_h.n() > 1).then(|| plan.head_h.clone())
}

/// Where a run-time rotation happens and which matrix it applies.
#[derive(Clone, Debug, PartialEq)]
pub struct OnlineTransform {
    pub site: Site,
    pub spec: HadamardSpec,
}

/// The post-GELU rotation: cannot be folded into `W_fc1` because GELU sits
/// between, so it runs online and its transpose is folded into `W_fc2`.
pub fn schedule_ffn_online(plan: &FusionPlan) -> OnlineTransform {
    OnlineTransform {
        site: Site::FfnHidden,
        spec: plan.hidden.clone(),
    }
}

/// `W_fc2 ← H_hiddenᵀ W_fc2`.
pub fn fuse_ffn_output<T: Scalar>(
    w: &DiTBlockWeights<T>,
    plan: &FusionPlan,
) -> Result<DiTBlockWeights<T>> {
    plan.check(w)?;
    let mut out = w.clone();
    out.w_fc2 = plan.hidden.apply_left_transposed(&w.w_fc2)?;
    Ok(out)
}

/// Fused weights plus the online schedule that makes them equivalent.
#[derive(Clone, Debug)]
pub struct FusedBlock<T: Scalar> {
    pub weights: DiTBlockWeights<T>,
    pub online: OnlineSchedule,
}

pub fn fuse_block<T: Scalar>(w: &DiTBlockWeights<T>, plan: &FusionPlan) -> Result<FusedBlock<T>> {
    let fused = fuse_input(w, plan)?;
    let fused = fuse_v_out(&fused, plan)?;
    let fused = fuse_ffn_output(&fused, plan)?;
    Ok(FusedBlock {
        weights: fused,
        online: OnlineSchedule {
            input: Some(plan.input.clone()),
            head_mix: head_mix_online(plan),
            hidden: Some(schedule_ffn_online(plan).spec),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{attention, forward_plain, gelu};
    use crate::synth::{gaussian, random_block};

    fn rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.sub(b).unwrap().frobenius() / b.frobenius()
    }

    #[test]
    fn single_dim_rotation_is_identity() {
        let w = random_block::<f64>(1, 1, 3, 0.0);
        let plan = FusionPlan::new(1, 1, VMode::PerHeadExact, None).unwrap();
        let f = fuse_input(&w, &plan).unwrap();
        assert_eq!(f.w_q, w.w_q);
        assert_eq!(f.w_fc1, w.w_fc1);
    }

    #[test]
    fn input_fusion_preserves_products() {
        let w = random_block::<f64>(32, 4, 1, 0.0);
        let plan = FusionPlan::new(32, 4, VMode::PerHeadExact, Some(5)).unwrap();
        let f = fuse_input(&w, &plan).unwrap();
        let x = gaussian::<f64>(10, 32, 2);
        let want = matmul(&x, &w.w_q).unwrap();
        let got = matmul(&plan.input.apply_right(&x).unwrap(), &f.w_q).unwrap();
        assert!(got.max_abs_diff(&want) <= 1e-10 * want.max_abs());
        let back = unfuse_input(&f, &plan).unwrap();
        for l in crate::block::Linear::ALL {
            assert!(back.get(l).max_abs_diff(w.get(l)) <= 1e-10);
        }
        // the original is untouched
        assert_eq!(w, random_block::<f64>(32, 4, 1, 0.0));
    }

    #[test]
    fn head_matrix_is_kronecker_of_factors() {
        let plan = FusionPlan::new(32, 4, VMode::PerHeadExact, Some(1)).unwrap();
        let dense = kron(&plan.head_h.realize::<f64>(), &plan.head_d.realize());
        assert!(plan.head_matrix::<f64>().max_abs_diff(&dense) <= 1e-12);
    }

    fn attention_out(
        x: &Tensor<f64>,
        w: &DiTBlockWeights<f64>,
        mix: Option<&HadamardSpec>,
    ) -> Tensor<f64> {
        let q = matmul(x, &w.w_q).unwrap();
        let k = matmul(x, &w.w_k).unwrap();
        let v = matmul(x, &w.w_v).unwrap();
        let mut o = attention(&q, &k, &v, w.heads).unwrap();
        if let Some(h) = mix {
            o = h.apply_right_blocks(&o, w.head_dim()).unwrap().0;
        }
        matmul(&o, &w.w_out).unwrap()
    }

    #[test]
    fn exact_value_fusion_preserves_attention() {
        let w = random_block::<f64>(32, 4, 8, 0.0);
        let x = gaussian::<f64>(12, 32, 9);
        let plan = FusionPlan::new(32, 4, VMode::PerHeadExact, Some(2)).unwrap();
        let f = fuse_v_out(&w, &plan).unwrap();
        let want = attention_out(&x, &w, None);
        let got = attention_out(&x, &f, head_mix_online(&plan).as_ref());
        assert!(rel(&got, &want) <= 1e-10);
    }

    #[test]
    fn modes_coincide_for_one_head() {
        let w = random_block::<f64>(16, 1, 4, 0.0);
        let x = gaussian::<f64>(8, 16, 5);
        let want = attention_out(&x, &w, None);
        for mode in [VMode::PerHeadExact, VMode::Literal] {
            let plan = FusionPlan::new(16, 1, mode, None).unwrap();
            assert!(head_mix_online(&plan).is_none());
            let f = fuse_v_out(&w, &plan).unwrap();
            assert!(rel(&attention_out(&x, &f, None), &want) <= 1e-10);
        }
    }

    #[test]
    fn literal_mode_breaks_multi_head_invariance() {
        let w = random_block::<f64>(32, 4, 8, 0.0);
        let x = gaussian::<f64>(12, 32, 9);
        let plan = FusionPlan::new(32, 4, VMode::Literal, None).unwrap();
        let f = fuse_v_out(&w, &plan).unwrap();
        let want = attention_out(&x, &w, None);
        assert!(rel(&attention_out(&x, &f, None), &want) > 1e-6);
    }

    #[test]
    fn ffn_online_rotation() {
        let w = random_block::<f64>(64, 4, 3, 0.0);
        let plan = FusionPlan::new(64, 4, VMode::PerHeadExact, None).unwrap();
        let t = schedule_ffn_online(&plan);
        assert_eq!((t.site, t.spec.n()), (Site::FfnHidden, 256));
        assert_eq!(t.spec.op_count(128, 256).unwrap().adds, 128 * 256 * 8);
        let f = fuse_ffn_output(&w, &plan).unwrap();
        let x = gaussian::<f64>(6, 64, 4);
        let g = matmul(&x, &w.w_fc1).unwrap().map(gelu);
        let want = matmul(&g, &w.w_fc2).unwrap();
        let got = matmul(&t.spec.apply_right(&g).unwrap(), &f.w_fc2).unwrap();
        assert!(rel(&got, &want) <= 1e-10);
        let zero = Tensor::<f64>::zeros(&[2, 256]);
        assert_eq!(t.spec.apply_right(&zero).unwrap(), zero);
    }

    #[test]
    fn fused_block_matches_reference() {
        for (n, h) in [(32, 2), (64, 4)] {
            let w = random_block::<f64>(n, h, 11, 0.0);
            let plan = FusionPlan::for_weights(&w, VMode::PerHeadExact, Some(7)).unwrap();
            let fused = fuse_block(&w, &plan).unwrap();
            let x = gaussian::<f64>(16, n, 12);
            let want = forward_plain(&x, &w, &OnlineSchedule::none()).unwrap();
            let got = forward_plain(&x, &fused.weights, &fused.online).unwrap();
            assert!(rel(&got, &want) <= 1e-9);
        }
    }

    #[test]
    fn plan_errors() {
        assert!(FusionPlan::new(32, 3, VMode::PerHeadExact, None).is_err());
        assert!(matches!(
            FusionPlan::new(36, 2, VMode::PerHeadExact, None),
            Err(Error::UnsupportedOrder { .. })
        ));
        let w = random_block::<f64>(32, 2, 0, 0.0);
        let plan = FusionPlan::new(64, 2, VMode::PerHeadExact, None).unwrap();
        assert!(fuse_input(&w, &plan).is_err());
    }
}
