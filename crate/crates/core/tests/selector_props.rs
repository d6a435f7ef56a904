use fpq_core::format::{candidate_formats, FpFormat};
use fpq_core::selector::{select_for_spread, select_format, spread_indicator, SelectionConfig};
use fpq_core::synth::gaussian;
use proptest::prelude::*;

proptest! {
    #[test]
    fn selection_ignores_global_scale(seed in 0u64..500, exp in -30i32..30, frac in 0.5f64..2.0) {
        let w = gaussian::<f64>(16, 16, seed).map(|v| v * v * v);
        let cfg = SelectionConfig::default();
        let c = 2f64.powi(exp) * frac;
        prop_assert_eq!(select_format(&w, &cfg).unwrap(), select_format(&w.scale(c), &cfg).unwrap());
    }

    #[test]
    fn spread_shrinks_as_alpha_grows(seed in 0u64..500, a in 1.0f64..98.0, gap in 0.5f64..1.5) {
        let w = gaussian::<f64>(8, 8, seed);
        let lo = spread_indicator(&w, a).unwrap();
        let hi = spread_indicator(&w, a + gap).unwrap();
        prop_assert!(hi <= lo);
    }

    #[test]
    fn wider_spread_never_picks_fewer_exponent_bits(s in 1.0f64..1e4, k in 1.0f64..10.0, bits in 3u32..9) {
        let a = select_for_spread(s, bits).unwrap();
        let b = select_for_spread(s * k, bits).unwrap();
        prop_assert!(b.exp_bits() >= a.exp_bits());
    }
}

#[test]
fn eight_bit_candidates_cover_e4m3() {
    let c = candidate_formats(8).unwrap();
    assert!(c.contains(&FpFormat::E4M3) && c.contains(&FpFormat::E2M5));
    assert!(c.iter().all(|f| f.exp_bits() >= 1 && f.n_bits() == 8));
}
