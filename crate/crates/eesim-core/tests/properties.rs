//! Property tests over the numeric format, the sparse codec, entropy, and
//! the DVFS primitives.

use eesim_core::dvfs::{select_vf, transition, LdoAdpllModel, VfTable};
use eesim_core::earlyexit::{assess_exit, entropy_stable};
use eesim_core::numerics::{FloatFormat, QuantTensor};
use eesim_core::sparse::{decode_bitmask, encode_bitmask, magnitude_prune, storage_footprint};
use proptest::prelude::*;

fn arb_format() -> impl Strategy<Value = FloatFormat> {
    (1u8..=6, -20i32..10).prop_map(|(bits, bias)| FloatFormat::new(bits, bias).unwrap())
}

/// Values are immutable after construction and safe to share across
/// threads.
#[test]
fn core_values_are_send_and_sync() {
    fn check<T: Send + Sync>() {}
    check::<QuantTensor>();
    check::<eesim_core::sparse::BitmaskTensor>();
    check::<eesim_core::model::EncoderBundle>();
    check::<eesim_core::earlyexit::ExitPredictor>();
    check::<eesim_core::envm::EnvmImage>();
    check::<eesim_core::dvfs::VfTable>();
    check::<eesim_core::simulator::SentenceResult>();
}

proptest! {
    #[test]
    fn every_code_round_trips(fmt in arb_format(), code in any::<u8>()) {
        let value = fmt.decode(code);
        prop_assert_eq!(fmt.encode(value), code);
    }

    #[test]
    fn quantize_preserves_order(fmt in arb_format(), a in -1e4f64..1e4, b in -1e4f64..1e4) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(fmt.decode(fmt.encode(lo)) <= fmt.decode(fmt.encode(hi)));
    }

    #[test]
    fn bitmask_codec_is_a_bijection(
        rows in 1usize..20,
        cols in 1usize..20,
        density in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..rows * cols)
            .map(|_| if rng.gen_bool(density) { rng.gen_range(-2.0..2.0) } else { 0.0 })
            .collect();
        let q = QuantTensor::quantize_fit(&vals, vec![rows, cols], 4).unwrap();
        let s = encode_bitmask(&q);
        prop_assert_eq!(decode_bitmask(&s).unwrap(), q);
        // Serialized bytes round-trip bit-exactly too.
        let back = eesim_core::sparse::BitmaskTensor::from_bytes(&s.to_bytes()).unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn prune_is_idempotent_and_density_bounded(
        n in 1usize..300,
        density in 0.01f64..1.0,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let pruned = magnitude_prune(&vals, density).unwrap();
        prop_assert_eq!(magnitude_prune(&pruned, density).unwrap(), pruned.clone());
        let kept = pruned.iter().filter(|&&v| v != 0.0).count() as f64;
        prop_assert!(kept / n as f64 <= density + 1.0 / n as f64 + 1e-12);
    }

    #[test]
    fn footprint_matches_counts(
        n in 1usize..500,
        density in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(density) { rng.gen_range(0.5..2.0) } else { 0.0 })
            .collect();
        let s = encode_bitmask(&QuantTensor::quantize_fit(&vals, vec![n], 4).unwrap());
        let fp = storage_footprint(&s);
        prop_assert_eq!(fp.payload_bytes, s.payload().len());
        prop_assert_eq!(fp.mask_bytes, n.div_ceil(8));
        prop_assert_eq!(fp.total_bytes, fp.payload_bytes + fp.mask_bytes);
    }

    #[test]
    fn entropy_shift_invariance_and_bounds(
        k in 2usize..10,
        shift in -200.0f64..200.0,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let shifted: Vec<f64> = logits.iter().map(|&x| x + shift).collect();
        let h = entropy_stable(&logits);
        prop_assert!((h - entropy_stable(&shifted)).abs() < 1e-12);
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (k as f64).ln() + 1e-12);
    }

    #[test]
    fn exit_assessment_monotone(h in 0.0f64..3.0, t in 0.0f64..3.0, bump in 0.0f64..1.0) {
        if assess_exit(h, t) {
            prop_assert!(assess_exit(h, t + bump));
        }
    }

    #[test]
    fn vf_selection_monotone_and_transitions_capped(
        f1 in 0.0f64..1.3e9,
        f2 in 0.0f64..1.3e9,
    ) {
        let table = VfTable::default_sweep();
        let model = LdoAdpllModel::default();
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        let (p_lo, _) = select_vf(&table, lo);
        let (p_hi, _) = select_vf(&table, hi);
        prop_assert!(p_lo.voltage <= p_hi.voltage);
        let t = transition(&model, p_lo, p_hi);
        prop_assert!(t.time_ns <= model.settle_cap_ns);
        let back = transition(&model, p_hi, p_lo);
        prop_assert_eq!(t.time_ns, back.time_ns);
    }
}
