//! Property tests for structural invariants across modules.

use pam_core::lattice::{LatticeField, LatticeSpec, Spectral};
use pam_core::noise::build_kernels;
use pam_core::paths::{exp_functional_mc, TimeRule};
use pam_core::rng::SeedStream;
use pam_core::spde::{init_condition, MeasureSpec, ObservablesConfig, Scheme, TestFunction};
use pam_core::special::{self, ModelParams};
use proptest::prelude::*;
use rand::RngCore;

fn small_lattice() -> LatticeSpec {
    LatticeSpec::new(3, 8, 2.4).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn alpha_is_increasing_in_eta(e1 in 0.0f64..0.125, e2 in 0.0f64..0.125) {
        prop_assume!(e1 < e2);
        prop_assert!(special::alpha_of_eta(3, e1).unwrap() < special::alpha_of_eta(3, e2).unwrap());
    }

    #[test]
    fn model_alpha_equals_alpha_of_half_kappa_squared(kappa in 0.01f64..0.49, d in 3usize..7) {
        let p = ModelParams::new(d, kappa).unwrap();
        let a = special::alpha_of_eta(d, kappa * kappa / 2.0).unwrap();
        prop_assert!((a - p.alpha()).abs() < 1e-12);
    }

    #[test]
    fn bridge_moment_is_nondecreasing_in_eta(
        e1 in 0.0f64..0.12, de in 0.0f64..0.005, a in 0.2f64..3.0, b in 0.2f64..3.0, t in 0.2f64..3.0,
    ) {
        let lo = special::bridge_exp_moment_exact(3, e1, a, b, t).unwrap();
        let hi = special::bridge_exp_moment_exact(3, e1 + de, a, b, t).unwrap();
        prop_assert!(hi >= lo * (1.0 - 1e-12));
        prop_assert!(lo >= 1.0 - 1e-12);
    }

    #[test]
    fn clipped_functional_is_monotone_in_clip(seed in any::<u64>(), eta in 0.01f64..0.12) {
        // Same paths, larger cap: every sample grows, so the mean does.
        let s = SeedStream::new(seed, "clip-monotone");
        let x = [0.3, 0.0, 0.0];
        let y = [0.0, 0.3, 0.0];
        let run = |clip| exp_functional_mc(3, eta, &x, &y, 1.0, 64, 200, clip, TimeRule::Trapezoid, &s).unwrap().mean;
        let (a, b, c) = (run(1e2), run(1e3), run(1e4));
        prop_assert!(a <= b && b <= c);
    }

    #[test]
    fn kernel_is_even_and_peaked_at_zero(i in -4i64..4, j in -4i64..4, k in -4i64..4) {
        let p = ModelParams::new(3, 0.4).unwrap();
        let kern = build_kernels(&p, 0.7, small_lattice()).unwrap();
        let h = kern.h_at_lag(&[i, j, k]);
        prop_assert!((h - kern.h_at_lag(&[-i, -j, -k])).abs() <= 1e-12 * h.abs());
        prop_assert!(h <= kern.h_at_lag(&[0, 0, 0]));
    }

    #[test]
    fn heat_flow_conserves_mass_and_positivity(vals in prop::collection::vec(0.0f64..5.0, 512), tau in 0.0f64..0.5) {
        let lat = small_lattice();
        let spectral = Spectral::new(lat);
        let mut ws = spectral.workspace();
        let mult = spectral.heat_multiplier(tau);
        let mut out = vals.clone();
        spectral.apply_many(&mut [&mut out[..]], &mult, &mut ws);
        let before: f64 = vals.iter().sum();
        let after: f64 = out.iter().sum();
        prop_assert!((after - before).abs() <= 1e-10 * before.max(1.0));
        prop_assert!(out.iter().all(|&v| v >= -1e-12 * before.max(1.0)));
    }

    #[test]
    fn solutions_stay_positive(seed in any::<u64>(), kappa in 0.05f64..0.49) {
        let p = ModelParams::new(3, kappa).unwrap();
        let lat = small_lattice();
        let scheme = Scheme::new(&p, 0.7, lat, 0.01).unwrap();
        let init = init_condition(&MeasureSpec::atom(vec![0.0; 3], 1.0, 0.49), &lat).unwrap();
        let cfg = ObservablesConfig {
            output_times: vec![0.0, 0.2],
            test_functions: vec![TestFunction::gaussian(vec![0.0; 3], 0.5)],
            ..Default::default()
        };
        let obs = scheme.prepare(&cfg).unwrap();
        let r = scheme.run(&init, &obs, &SeedStream::new(seed, "positivity"), 0).unwrap();
        prop_assert!(r.min_value > 0.0);
        prop_assert!(r.total_mass.iter().all(|m| m.is_finite() && *m > 0.0));
        prop_assert!(r.test_integrals[0].iter().all(|v| *v > 0.0));
    }

    #[test]
    fn substreams_are_pure_functions_of_their_key(master in any::<u64>(), idx in 0u64..1_000_000) {
        let s = SeedStream::new(master, "keys");
        let a = s.substream(idx).next_u64();
        let b = SeedStream::new(master, "keys").substream(idx).next_u64();
        let c = s.substream(idx + 1).next_u64();
        let e = s.child("other").substream(idx).next_u64();
        prop_assert_eq!(a, b);
        prop_assert_ne!(a, c);
        prop_assert_ne!(a, e);
    }

    #[test]
    fn measure_specs_round_trip_through_toml(w in 0.1f64..5.0, delta in 0.0f64..1.0, x in -1.0f64..1.0) {
        for mu in [
            MeasureSpec::atom(vec![x, 0.0, 0.5], w, delta + 0.1),
            MeasureSpec::lebesgue(w),
            MeasureSpec::density(TestFunction::gaussian(vec![x, 0.0, 0.0], w), delta),
        ] {
            let text = toml::to_string(&mu).unwrap();
            let back: MeasureSpec = toml::from_str(&text).unwrap();
            prop_assert_eq!(back, mu);
        }
    }
}

#[test]
fn null_model_keeps_total_mass() {
    let p = ModelParams::with_null(3, 0.0).unwrap();
    let lat = small_lattice();
    let scheme = Scheme::new(&p, 0.7, lat, 0.01).unwrap();
    let init = init_condition(&MeasureSpec::atom(vec![0.2, 0.0, 0.0], 2.0, 0.49), &lat).unwrap();
    let cfg = ObservablesConfig {
        output_times: vec![0.0, 0.1, 0.3],
        ..Default::default()
    };
    let r = scheme.run(&init, &scheme.prepare(&cfg).unwrap(), &SeedStream::new(5, "null"), 0).unwrap();
    for m in &r.total_mass {
        assert!((m - init.total_mass()).abs() < 1e-12 * init.total_mass());
    }
    let f = LatticeField::constant(lat, 1.0);
    assert!((f.total_mass() - lat.box_length().powi(3)).abs() < 1e-9);
}
