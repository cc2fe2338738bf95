//! Randomized invariants across schedule, fabric, DSP, imaging and budget.

use aperture_fabric::budget::range_reduction_factor;
use aperture_fabric::dsp::{estimate_state_snr, range_profile, usable_states, ChirpTiming, RangeFftConfig, Window};
use aperture_fabric::fabric::{ClipOnModule, RippleComponent, ScanLaw};
use aperture_fabric::imaging::focus_kernel;
use aperture_fabric::schedule::{assign_subbands, build_schedule, validate_guard_gaps, GuardBudget, ScheduleParams};
use aperture_fabric::{presets, Complex64, FabricConfig, LossComponents, RippleProfile, Vec3, SPEED_OF_LIGHT};
use proptest::prelude::*;

fn timing() -> ChirpTiming {
    ChirpTiming {
        f_center: 62e9,
        slope: 2e12,
        sample_rate: 2e6,
    }
}

fn complex_vec(n: usize) -> impl Strategy<Value = Vec<Complex64>> {
    prop::collection::vec(
        (-1.0..1.0f64, -1.0..1.0f64).prop_map(|(re, im)| Complex64::new(re, im)),
        n,
    )
}

fn window() -> impl Strategy<Value = Window> {
    prop_oneof![Just(Window::Rectangular), Just(Window::Hann)]
}

prop_compose! {
    fn schedule_inputs()(
        k in 1usize..=4,
        extra in 0usize..60,
        evolutions in 1usize..=3,
        guard in 0.0..400e-9f64,
        duration in 5e-6..60e-6f64,
        bandwidth in 20e6..200e6f64,
    ) -> (usize, ScheduleParams) {
        (k, ScheduleParams {
            num_states: k + extra,
            evolutions,
            guard_time_s: guard,
            chirp_duration_s: duration,
            chirp_bandwidth_hz: bandwidth,
            ..Default::default()
        })
    }
}

prop_compose! {
    fn guard_budget()(r in 0.1..15.0f64, ring in 0.0..100e-9f64, mp in 0.0..150e-9f64) -> GuardBudget {
        GuardBudget::from_max_range(r, ring, mp)
    }
}

/// Three modules with random passbands, lengths, scan laws and ripple.
fn random_fabric() -> impl Strategy<Value = FabricConfig> {
    (
        prop::collection::vec((0.01..0.1f64, prop_oneof![Just(1.0), 0.5..2.0f64]), 3),
        0.0..300e6f64,
        0.0..5.0f64,
        0.0..std::f64::consts::TAU,
    )
        .prop_map(|(mods, guard, ripple_peak, phase)| {
            let subs = assign_subbands(presets::band(), 3, guard).unwrap();
            let modules = subs
                .iter()
                .zip(mods)
                .enumerate()
                .map(|(i, (&passband, (length, exponent)))| ClipOnModule {
                    id: i,
                    anchor: Vec3::new(0.3 * i as f64, 0.0, 0.0),
                    axis: Vec3::new(1.0, 1.0, 0.0).normalize(),
                    aperture_length: length,
                    passband,
                    losses: LossComponents {
                        coupling_db: 3.0,
                        guided_wave_db: 1.0,
                        insertion_db: 0.5,
                        ripple_db_peak: ripple_peak,
                    },
                    scan_law: if exponent == 1.0 {
                        ScanLaw::Linear
                    } else {
                        ScanLaw::Power { exponent }
                    },
                })
                .collect();
            let ripple = RippleProfile {
                components: vec![
                    RippleComponent {
                        amplitude: 1.0,
                        period_hz: 410e6,
                        phase_rad: phase,
                    },
                    RippleComponent {
                        amplitude: 0.4,
                        period_hz: 2.3e9,
                        phase_rad: 0.5,
                    },
                ],
            };
            FabricConfig::new(modules, Vec3::zeros(), ripple).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn passing_schedules_have_disjoint_echo_windows((k, params) in schedule_inputs(), budget in guard_budget()) {
        let subs = assign_subbands(presets::band(), k, 100e6).unwrap();
        let Ok(schedule) = build_schedule(presets::band(), &subs, &params) else { return Ok(()) };
        let report = validate_guard_gaps(&schedule, &budget);
        if report.passed {
            for w in schedule.chirps.windows(2) {
                prop_assert!(w[0].t_end() + budget.total() < w[1].t_start);
            }
        }
    }

    #[test]
    fn each_chirp_span_has_exactly_one_owner((k, params) in schedule_inputs()) {
        let subs = assign_subbands(presets::band(), k, 100e6).unwrap();
        let Ok(schedule) = build_schedule(presets::band(), &subs, &params) else { return Ok(()) };
        for c in &schedule.chirps {
            let (lo, hi) = c.span();
            let owners: Vec<_> = subs.iter().filter(|s| s.contains_span(lo, hi)).collect();
            prop_assert_eq!(owners.len(), 1);
            prop_assert_eq!(owners[0].module_id, c.module_id);
        }
    }

    #[test]
    fn schedules_are_deterministic_and_monotone((k, params) in schedule_inputs()) {
        let subs = assign_subbands(presets::band(), k, 100e6).unwrap();
        let Ok(a) = build_schedule(presets::band(), &subs, &params) else { return Ok(()) };
        let b = build_schedule(presets::band(), &subs, &params).unwrap();
        prop_assert_eq!(a.content_hash(), b.content_hash());
        for pass in a.chirps.chunks(a.num_states) {
            prop_assert!(pass.windows(2).all(|w| w[1].f_center > w[0].f_center));
        }
    }

    #[test]
    fn at_most_one_module_is_active(fabric in random_fabric()) {
        let (lo, hi) = fabric.extent();
        for i in 0..=20_000 {
            let f = lo + (hi - lo) * i as f64 / 20_000.0;
            let active = fabric.modules.iter().filter(|m| m.passband.contains(f)).count();
            prop_assert!(active <= 1);
            prop_assert_eq!(active == 1, fabric.active_module(f).is_some());
        }
    }

    #[test]
    fn linear_mapping_is_lipschitz_and_spans_the_aperture(fabric in random_fabric(), t in 0.0..1.0f64, eps in 1.0..50e6f64) {
        for m in fabric.modules.iter().filter(|m| matches!(m.scan_law, ScanLaw::Linear)) {
            let pb = m.passband;
            let f = pb.f_lo + 0.999 * t * (pb.width() - eps);
            let a = fabric.nominal_map(f).unwrap();
            let b = fabric.nominal_map(f + eps).unwrap();
            prop_assert!((b - a).norm() <= m.aperture_length / pb.width() * eps + 1e-12);
            // passbands are half-open, so sweep up to 1 Hz below the top edge
            let top = pb.f_hi - 1.0;
            let span = (fabric.nominal_map(top).unwrap() - fabric.nominal_map(pb.f_lo).unwrap()).norm();
            let want = m.aperture_length * (top - pb.f_lo) / pb.width();
            prop_assert!((span - want).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_stays_within_ripple_bounds(fabric in random_fabric(), t in 0.0..1.0f64) {
        let (lo, hi) = fabric.extent();
        let f = lo + t * (hi - lo);
        if let Some(i) = fabric.active_index(f) {
            let l = fabric.modules[i].losses;
            let loss = fabric.loss_at(f).unwrap();
            prop_assert!(loss >= l.fixed_db() - l.ripple_db_peak - 1e-12);
            prop_assert!(loss <= l.fixed_db() + l.ripple_db_peak + 1e-12);
        }
    }

    #[test]
    fn range_fft_is_linear(
        x in complex_vec(64),
        y in complex_vec(64),
        (ar, ai, br, bi) in (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64),
        window in window(),
        zero_pad in 1usize..=4,
    ) {
        let cfg = RangeFftConfig { window, zero_pad };
        let (a, b) = (Complex64::new(ar, ai), Complex64::new(br, bi));
        let mix: Vec<Complex64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
        let px = range_profile(&x, 0, timing(), cfg).unwrap();
        let py = range_profile(&y, 0, timing(), cfg).unwrap();
        let pm = range_profile(&mix, 0, timing(), cfg).unwrap();
        let scale = pm.bins.iter().map(|v| v.norm()).fold(1e-300, f64::max);
        for k in 0..pm.bins.len() {
            prop_assert!((pm.bins[k] - (a * px.bins[k] + b * py.bins[k])).norm() <= 1e-9 * scale);
        }
    }

    #[test]
    fn range_fft_preserves_energy(x in complex_vec(100), window in window(), zero_pad in 1usize..=8) {
        let cfg = RangeFftConfig { window, zero_pad };
        let w = window.coefficients(x.len());
        let energy: f64 = x.iter().zip(&w).map(|(s, wi)| (s * wi).norm_sqr()).sum();
        let p = range_profile(&x, 0, timing(), cfg).unwrap();
        let spectral: f64 = p.bins.iter().map(|b| b.norm_sqr()).sum::<f64>() / zero_pad as f64;
        prop_assert!((spectral - energy).abs() <= 1e-6 * energy);
    }

    #[test]
    fn usable_states_matches_filter(signals in prop::collection::vec(complex_vec(32), 1..12), threshold in -5.0..25.0f64) {
        let profiles: Vec<_> = signals
            .iter()
            .enumerate()
            .map(|(m, x)| range_profile(x, m, timing(), RangeFftConfig::default()).unwrap())
            .collect();
        let (usable, snr) = usable_states(&profiles, threshold).unwrap();
        let mut want = Vec::new();
        for (m, p) in profiles.iter().enumerate() {
            let s = estimate_state_snr(p, false).unwrap();
            prop_assert_eq!(s, snr[m]);
            if s > threshold {
                want.push(m);
            }
        }
        prop_assert_eq!(usable.members, want);
    }

    #[test]
    fn range_factor_multiplies(a in 0.0..30.0f64, b in 0.0..30.0f64) {
        let lhs = range_reduction_factor(a + b);
        let rhs = range_reduction_factor(a) * range_reduction_factor(b);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs);
    }

    #[test]
    fn kernel_is_unity_on_whole_wavelengths(f in 55e9..70e9f64, n in 1u32..2000) {
        // kernel phase is 4πfr/c, so whole cycles occur every half wavelength
        let r = n as f64 * SPEED_OF_LIGHT / (2.0 * f);
        let k = focus_kernel(f, r);
        prop_assert!((k - Complex64::new(1.0, 0.0)).norm() < 1e-12 * n as f64);
    }
}
