use fpq_core::format::{minmax_bias, FpFormat};
use fpq_core::quantizer::{channel_biases, minmax_quantize, quant_error, quantize_with_biases};
use fpq_core::tensor::Tensor;
use proptest::prelude::*;

fn format_strategy() -> impl Strategy<Value = FpFormat> {
    prop_oneof![
        Just(FpFormat::E1M2),
        Just(FpFormat::E2M1),
        Just(FpFormat::E3M0),
        Just(FpFormat::E2M5),
        Just(FpFormat::E4M3),
    ]
}

fn matrix_strategy() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..8, 1usize..8).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-1e6f64..1e6, r * c)
            .prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
    })
}

proptest! {
    #[test]
    fn values_lie_on_channel_grids(a in matrix_strategy(), f in format_strategy(), axis in 0usize..2) {
        let q = minmax_quantize(&a, f, Some(axis)).unwrap();
        let cols = a.cols();
        for (k, v) in q.values.data().iter().enumerate() {
            let ch = if axis == 0 { k / cols } else { k % cols };
            let grid = q.biased_format(ch).grid::<f64>();
            prop_assert!(grid.contains(&v.abs()), "{} not on grid", v);
        }
    }

    #[test]
    fn quantization_is_idempotent(a in matrix_strategy(), f in format_strategy()) {
        let q = minmax_quantize(&a, f, Some(1)).unwrap();
        let again = minmax_quantize(&q.values, f, Some(1)).unwrap();
        prop_assert_eq!(&again.values, &q.values);
        prop_assert_eq!(again.biases, q.biases);
    }

    #[test]
    fn power_of_two_scaling_commutes(a in matrix_strategy(), f in format_strategy(), k in -20i32..20) {
        let s = 2f64.powi(k);
        let q = minmax_quantize(&a, f, None).unwrap();
        let qs = minmax_quantize(&a.scale(s), f, None).unwrap();
        prop_assert_eq!(qs.values, q.values.scale(s));
        prop_assert_eq!(qs.biases[0], q.biases[0] + k);
    }

    #[test]
    fn signs_and_zeros_are_preserved(a in matrix_strategy(), f in format_strategy()) {
        let q = minmax_quantize(&a, f, Some(0)).unwrap();
        for (x, y) in a.data().iter().zip(q.values.data()) {
            prop_assert!(*y == 0.0 || x.signum() == y.signum());
            if *x == 0.0 {
                prop_assert_eq!(*y, 0.0);
            }
        }
    }

    #[test]
    fn extra_mantissa_bits_refine_at_equal_bias(a in matrix_strategy(), pair in 0usize..3) {
        let (coarse, fine) = [
            (FpFormat::E1M2, FpFormat::new(1, 6).unwrap()),
            (FpFormat::E2M1, FpFormat::E2M5),
            (FpFormat::E3M0, FpFormat::new(3, 4).unwrap()),
        ][pair];
        let biases = channel_biases(&a, coarse, Some(1)).unwrap();
        let qc = quantize_with_biases(&a, coarse, &biases, Some(1)).unwrap();
        let qf = quantize_with_biases(&a, fine, &biases, Some(1)).unwrap();
        for ((x, c), f) in a.data().iter().zip(qc.values.data()).zip(qf.values.data()) {
            prop_assert!((x - f).abs() <= (x - c).abs());
        }
    }

    #[test]
    fn channel_max_never_below_grid_top(max_abs in 1e-30f64..1e30, f in format_strategy()) {
        let b = minmax_bias(f, max_abs);
        let top = f.with_bias(b).value_max::<f64>();
        prop_assert!(top <= max_abs);
        prop_assert!(f.with_bias(b + 1).value_max::<f64>() > max_abs);
    }
}

#[test]
fn more_mantissa_bits_lower_error_at_equal_bias() {
    let a = fpq_core::synth::gaussian::<f64>(64, 64, 3);
    let biases = channel_biases(&a, FpFormat::E2M1, Some(1)).unwrap();
    let q4 = quantize_with_biases(&a, FpFormat::E2M1, &biases, Some(1)).unwrap();
    let q8 = quantize_with_biases(&a, FpFormat::E2M5, &biases, Some(1)).unwrap();
    let (e4, e8) = (quant_error(&a, &q4).unwrap(), quant_error(&a, &q8).unwrap());
    assert!(e8.mse < e4.mse);
    assert!(e8.cosine > e4.cosine);
}

#[test]
fn non_finite_input_is_rejected() {
    let a = Tensor::matrix(1, 2, vec![1.0f64, f64::NAN]).unwrap();
    assert!(minmax_quantize(&a, FpFormat::E2M1, Some(1)).is_err());
    let a = Tensor::matrix(1, 2, vec![1.0f64, 2.0]).unwrap();
    assert!(minmax_quantize(&a, FpFormat::E2M1, Some(2)).is_err());
}
