use evalp_core::data::{Dataset, Normalization};
use evalp_core::gauss::DiagGaussian;
use evalp_core::metrics::{frechet_gaussian, log_sum_exp};
use evalp_core::models::EnergyFunction;
use evalp_core::models::{FlowSampler, FlowSpec};
use evalp_core::sampling::{sample_sir, SirConfig, WeightMode};
use evalp_core::stage2::ObjectiveTerms;
use evalp_core::{SeededRng, Tensor};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    -1e3..1e3f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lower_bound_never_exceeds_upper(eq in finite(), eg in finite(), kl in 0.0..50.0f64, gp in 0.0..10.0f64, lambda in 1e-3..100.0f64) {
        let t = ObjectiveTerms::new(0, eq, eg, kl, gp, lambda);
        prop_assert!(t.lower <= t.upper);
        prop_assert!((t.upper - (-eq + eg + kl)).abs() < 1e-9);
        let z = ObjectiveTerms::new(0, eq, eg, kl, 0.0, lambda);
        prop_assert_eq!(z.lower, z.upper);
    }

    #[test]
    fn kl_to_standard_is_non_negative(mu in prop::collection::vec(-5.0..5.0f64, 1..6), seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let logvar: Vec<f64> = mu.iter().map(|_| rng.uniform_range(-6.0, 6.0)).collect();
        let q = DiagGaussian::new(mu, logvar).unwrap();
        prop_assert!(q.kl_to_standard() >= 0.0);
    }

    #[test]
    fn normalization_round_trips(seed in any::<u64>(), rows in 2usize..40, cols in 1usize..5) {
        let mut rng = SeededRng::new(seed);
        let x = rng.normal_tensor(rows, cols).map(|v| 7.0 * v + 3.0);
        let ds = Dataset::new("p", x.clone()).unwrap().standardized().unwrap();
        let back = ds.normalization().invert(ds.samples()).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let id = Normalization::identity(cols);
        prop_assert_eq!(id.apply(&x).unwrap(), x);
    }

    #[test]
    fn frechet_symmetric_and_non_negative(seed in any::<u64>(), shift in -3.0..3.0f64) {
        let mut rng = SeededRng::new(seed);
        let a = rng.normal_tensor(60, 2);
        let b = rng.normal_tensor(80, 2).map(|v| 1.7 * v + shift);
        let ab = frechet_gaussian(&a, &b).unwrap().value;
        let ba = frechet_gaussian(&b, &a).unwrap().value;
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-9 * (1.0 + ab));
        prop_assert!(frechet_gaussian(&a, &a).unwrap().value.abs() < 1e-9);
    }

    #[test]
    fn log_sum_exp_bounds(v in prop::collection::vec(-700.0..700.0f64, 1..50)) {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let l = log_sum_exp(&v);
        prop_assert!(l >= m);
        prop_assert!(l <= m + (v.len() as f64).ln() + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn flow_round_trip_and_logdet_antisymmetry(seed in any::<u64>(), which in 0usize..3) {
        let nz = [2, 4, 16][which];
        let mut rng = SeededRng::new(seed);
        let flow = FlowSampler::randomized(FlowSpec { nz, hidden: 8, layers: 4 }, &mut rng);
        let eps = rng.normal_tensor(16, nz);
        let (z, ld) = flow.forward_values(&eps).unwrap();
        let (back, ldi) = flow.inverse_values(&z).unwrap();
        for (a, b) in back.data().iter().zip(eps.data()) {
            prop_assert!((a - b).abs() < 1e-8);
        }
        for (a, b) in ld.iter().zip(&ldi) {
            prop_assert!((a + b).abs() < 1e-8);
        }
    }

    #[test]
    fn sir_weights_are_normalized(seed in any::<u64>(), m in 1usize..200, tilted in any::<bool>()) {
        let mut rng = SeededRng::new(seed);
        let flow = FlowSampler::randomized(FlowSpec { nz: 2, hidden: 8, layers: 2 }, &mut rng);
        let f = EnergyFunction::new(2, 8, &mut rng);
        let cfg = SirConfig {
            proposals: m,
            normalizer_samples: 5,
            weight_mode: if tilted { WeightMode::TiltedBase } else { WeightMode::PaperLiteral },
            seed,
        };
        let d = sample_sir(&f, &flow, &cfg, &mut rng).unwrap();
        let total: f64 = d.log_weights.iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(d.index < m);
        prop_assert_eq!(d.z.len(), 2);
        prop_assert!(Tensor::from_vec(&[1, 2], d.z).unwrap().is_finite());
    }
}
