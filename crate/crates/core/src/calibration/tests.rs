use super::*;
use crate::dsp::RangeFftConfig;
use crate::echo::{radar_snr, REFERENCE_RCS};
use crate::presets;
use approx::assert_relative_eq;

fn noise(reference_snr_db: f64, seed: u64, noiseless: bool) -> NoiseSpec {
    NoiseSpec {
        reference_snr_db,
        reference_range_m: 3.0,
        seed,
        noiseless,
    }
}

struct Setup {
    schedule: ChirpSchedule,
    fabric: FabricConfig,
    refs: Vec<ReferenceScatterer>,
}

fn setup() -> Setup {
    let fabric = presets::ideal_fabric();
    Setup {
        schedule: presets::schedule(64, 2),
        refs: default_references(&fabric),
        fabric,
    }
}

fn measure(s: &Setup, truth: &PerturbationState, noise: &NoiseSpec) -> CalibMeasurement {
    let cube = synthesize_references(
        &s.schedule,
        &s.fabric,
        truth,
        &s.refs,
        noise,
        &SynthesisConfig::default(),
    )
    .unwrap();
    measure_references(
        &cube,
        &s.fabric,
        &s.refs,
        &UsableSet::all(s.schedule.num_states),
        noise,
        &CalibOptions::default(),
    )
    .unwrap()
}

/// Reference SNR such that the weakest reference echo over all states
/// reaches `snr_db` on a single chirp.
fn snr_for_weakest_reference(s: &Setup, snr_db: f64) -> f64 {
    let base = noise(0.0, 0, true);
    let weakest = s
        .schedule
        .state_frequencies()
        .iter()
        .flat_map(|&f| {
            let x = s.fabric.nominal_map(f).unwrap();
            s.refs
                .iter()
                .map(move |r| radar_snr((r.position - x).norm(), &base, 0.0) + 10.0 * (r.rcs / REFERENCE_RCS).log10())
        })
        .fold(f64::INFINITY, f64::min);
    snr_db - weakest
}

#[test]
fn default_references_meet_geometry_rules() {
    let s = setup();
    validate_references(&s.refs, &s.fabric).unwrap();
    let c = s.fabric.centroid();
    for (r, want) in s.refs.iter().zip([0.10, 0.15, 0.20]) {
        assert_relative_eq!((r.position - c).norm(), want, epsilon = 1e-12);
    }
    for i in 0..3 {
        for j in i + 1..3 {
            let (a, b) = (s.refs[i].position - c, s.refs[j].position - c);
            let angle = (a.dot(&b) / (a.norm() * b.norm())).acos().to_degrees();
            assert!(angle >= 30.0, "refs {i},{j}: {angle}°");
        }
    }
}

#[test]
fn rejects_bad_reference_sets() {
    let s = setup();
    assert!(validate_references(&s.refs[..2], &s.fabric).is_err());
    let mut dup = s.refs.clone();
    dup[2].id = 1;
    assert!(validate_references(&dup, &s.fabric).is_err());
    let mut collinear = s.refs.clone();
    let c = s.fabric.centroid();
    collinear[1].position = c + (s.refs[0].position - c) * 1.5;
    let err = validate_references(&collinear, &s.fabric).unwrap_err();
    assert!(err.to_string().contains("collinear"));
    let mut dead = s.refs.clone();
    dead[0].rcs = 0.0;
    assert!(validate_references(&dead, &s.fabric).is_err());
}

#[test]
fn model_delay_phase_examples() {
    let s = setup();
    let band = s.schedule.band;
    let mut theta = CalibParams::nominal(2);
    let f0 = 60.04e9;
    let base = model_reference_response(&theta, &s.fabric, &s.refs, &band, f0).unwrap();
    theta.tau0_s = 0.2e-9;
    let shifted = model_reference_response(&theta, &s.fabric, &s.refs, &band, f0).unwrap();
    for (a, b) in base.iter().zip(&shifted) {
        let expected = -TAU * f0 * 0.2e-9;
        let d = (b / a).arg() - expected;
        assert!(d.sin().abs() < 1e-9 && d.cos() > 0.0);
    }
    // 60 GHz · 0.2 ns is a whole number of cycles
    let whole: f64 = -TAU * 60e9 * 0.2e-9;
    assert!((whole.rem_euclid(TAU)).min(TAU - whole.rem_euclid(TAU)) < 1e-9);
    assert_relative_eq!(60e9 * 0.2e-9, 12.0, epsilon = 1e-12);
}

#[test]
fn six_db_gain_doubles_amplitude() {
    let s = setup();
    let band = s.schedule.band;
    let mut theta = CalibParams::nominal(2);
    for f in [60.1e9, 63.5e9, 65.9e9] {
        let base = model_reference_response(&theta, &s.fabric, &s.refs, &band, f).unwrap();
        theta.gain_coeffs = [20.0 * 2f64.log10(), 0.0, 0.0];
        let doubled = model_reference_response(&theta, &s.fabric, &s.refs, &band, f).unwrap();
        theta.gain_coeffs = [0.0; 3];
        for (a, b) in base.iter().zip(&doubled) {
            assert_relative_eq!(b.norm() / a.norm(), 2.0, epsilon = 1e-12);
            assert_relative_eq!((b / a).arg(), 0.0, epsilon = 1e-12);
        }
    }
    let g = 10f64.powf(6.02 / 20.0);
    assert!((g - 2.0).abs() < 1e-3);
}

#[test]
fn guard_band_frequency_is_an_error() {
    let s = setup();
    let theta = CalibParams::nominal(2);
    assert!(model_reference_response(&theta, &s.fabric, &s.refs, &s.schedule.band, 63.0e9).is_err());
    assert!(calibrated_map(&theta, &s.fabric, 63.0e9).is_err());
}

#[test]
fn noiseless_nominal_measurement_matches_model() {
    let s = setup();
    let meas = measure(&s, &PerturbationState::none(2), &noise(20.0, 0, true));
    let model = model_measurement(&CalibParams::nominal(2), &s.fabric, &s.refs, &meas).unwrap();
    for (st, m) in meas.states.iter().zip(&model) {
        for (p, (v, w)) in st.values.iter().zip(m).enumerate() {
            let rel = (v - w).norm() / w.norm();
            assert!(rel < 1e-6, "state {} ref {p}: {rel:e}", st.state);
        }
    }
}

#[test]
fn injected_delay_appears_as_cross_state_phase_slope() {
    let s = setup();
    let mut truth = PerturbationState::none(2);
    truth.delay_offset_s = 0.2e-9;
    let nominal = measure(&s, &PerturbationState::none(2), &noise(20.0, 0, true));
    let delayed = measure(&s, &truth, &noise(20.0, 0, true));
    for (a, b) in nominal.states.iter().zip(&delayed.states) {
        let f = a.timing.f_center;
        for p in 0..3 {
            let d = (b.values[p] / a.values[p]).arg() + TAU * f * 0.2e-9;
            assert!(d.sin().abs() < 1e-6 && d.cos() > 0.0, "state {}", a.state);
        }
    }
}

#[test]
fn coarse_bins_are_rejected() {
    let s = setup();
    let n = noise(20.0, 0, true);
    let cube = synthesize_references(
        &s.schedule,
        &s.fabric,
        &PerturbationState::none(2),
        &s.refs,
        &n,
        &SynthesisConfig::default(),
    )
    .unwrap();
    // bin spacing ≈ 0.094 m at 20× padding
    let opts = CalibOptions {
        processing: RangeFftConfig {
            window: Window::Hann,
            zero_pad: 20,
        },
        ..Default::default()
    };
    let c = s.fabric.centroid();
    let mut refs = s.refs.clone();
    for (r, range) in refs.iter_mut().zip([0.10, 0.14, 0.18]) {
        let dir = (r.position - c).normalize();
        r.position = c + dir * range;
    }
    let err = measure_references(&cube, &s.fabric, &refs, &UsableSet::all(64), &n, &opts).unwrap_err();
    assert!(matches!(err, CalibrationError::Unresolvable { .. }), "{err}");
}

#[test]
fn nominal_fit_stays_at_zero() {
    let s = setup();
    let meas = measure(&s, &PerturbationState::none(2), &noise(20.0, 0, true));
    let report = fit_calibration(
        &meas,
        &s.fabric,
        &s.refs,
        &CalibParams::nominal(2),
        &CalibOptions::default(),
    )
    .unwrap();
    assert!(report.converged, "{:?}", report.diagnostic);
    let norm = report.theta_hat.to_scaled().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-9, "‖θ̂‖ = {norm:e} natural units");
    assert!(report.warnings.is_empty());
}

#[test]
fn recovers_injected_perturbation() {
    let s = setup();
    let truth = presets::perturbed_truth();
    let meas = measure(&s, &truth, &noise(20.0, 0, true));
    let report = fit_calibration(
        &meas,
        &s.fabric,
        &s.refs,
        &CalibParams::nominal(2),
        &CalibOptions::default(),
    )
    .unwrap();
    assert!(report.converged, "{:?}", report.diagnostic);
    let want = CalibParams::from_perturbation(&truth);
    let got = &report.theta_hat;
    assert!((got.tau0_s - want.tau0_s).abs() < 5e-12, "τ0 {}", got.tau0_s);
    assert!(got.max_gain_error_db(&want) < 0.05);
    assert!(got.max_offset_error_m(&want) < 50e-6);
    assert!(report.residual_history.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn noisy_fit_reaches_truth_noise_floor() {
    let s = setup();
    let truth = presets::perturbed_truth();
    let n = noise(snr_for_weakest_reference(&s, 20.0), 11, false);
    let meas = measure(&s, &truth, &n);
    let report = fit_calibration(
        &meas,
        &s.fabric,
        &s.refs,
        &CalibParams::nominal(2),
        &CalibOptions::default(),
    )
    .unwrap();
    let floor = objective(&CalibParams::from_perturbation(&truth), &s.fabric, &s.refs, &meas).unwrap();
    let fitted = report.final_objective();
    assert!(10.0 * (fitted / floor).log10() < 3.0, "fit {fitted:e} floor {floor:e}");
}

#[test]
fn nominal_error_shrinks_with_snr() {
    let s = setup();
    let errors: Vec<f64> = [None, Some(40.0), Some(20.0)]
        .iter()
        .map(|snr| {
            let n = match snr {
                None => noise(20.0, 5, true),
                Some(v) => noise(snr_for_weakest_reference(&s, *v), 5, false),
            };
            let meas = measure(&s, &PerturbationState::none(2), &n);
            let r = fit_calibration(
                &meas,
                &s.fabric,
                &s.refs,
                &CalibParams::nominal(2),
                &CalibOptions::default(),
            )
            .unwrap();
            r.theta_hat.to_scaled().iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .collect();
    assert!(errors[0] < 1e-6);
    assert!(errors[0] < errors[1] && errors[1] < errors[2], "{errors:?}");
}

#[test]
fn needs_two_states_per_module() {
    let s = setup();
    let mut meas = measure(&s, &PerturbationState::none(2), &noise(20.0, 0, true));
    meas.states.retain(|st| st.state < 33);
    let err = fit_calibration(
        &meas,
        &s.fabric,
        &s.refs,
        &CalibParams::nominal(2),
        &CalibOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, CalibrationError::TooFewStates { module_id: 1, count: 1 }));
}

#[test]
fn normalization_identity_and_gain_only() {
    let s = setup();
    let cube = synthesize_references(
        &s.schedule,
        &s.fabric,
        &PerturbationState::none(2),
        &s.refs,
        &noise(20.0, 0, true),
        &SynthesisConfig::default(),
    )
    .unwrap();
    let p = cube.range_profile(10, 0, RangeFftConfig::default()).unwrap();
    assert_eq!(normalize_state(&p, &CalibParams::nominal(2), &s.schedule.band), p);
    let mut theta = CalibParams::nominal(2);
    theta.gain_coeffs = [3.0, -1.0, 0.5];
    let nu = s.schedule.band.normalized(p.timing.f_center);
    let g = 10f64.powf(theta.gain_db(nu) / 20.0);
    let q = normalize_state(&p, &theta, &s.schedule.band);
    for (a, b) in p.bins.iter().zip(&q.bins) {
        assert_relative_eq!(b.norm() * g, a.norm(), max_relative = 1e-12);
        if a.norm() > 0.0 {
            assert!((b.arg() - a.arg()).abs() < 1e-12);
        }
    }
}

#[test]
fn normalized_phase_matches_geometry_after_fit() {
    let s = setup();
    let truth = presets::perturbed_truth();
    let meas = measure(&s, &truth, &noise(20.0, 0, true));
    let report = fit_calibration(
        &meas,
        &s.fabric,
        &s.refs,
        &CalibParams::nominal(2),
        &CalibOptions::default(),
    )
    .unwrap();
    let target = Target::fixed(Vec3::new(0.05, 1.0, 0.02), 1.0);
    let cube = synthesize_beat(
        &s.schedule,
        &s.fabric,
        &truth,
        &[target],
        &noise(20.0, 0, true),
        &SynthesisConfig::default(),
    )
    .unwrap();
    for m in 0..s.schedule.num_states {
        let p = normalize_state(
            &cube.range_profile(m, 0, RangeFftConfig::default()).unwrap(),
            &report.theta_hat,
            &s.schedule.band,
        );
        let f = p.timing.f_center;
        let x = calibrated_map(&report.theta_hat, &s.fabric, f).unwrap();
        let r = (target.position - x).norm();
        let got = p.bins[p.nearest_bin(r)].arg();
        let d = got + 4.0 * PI * f * r / SPEED_OF_LIGHT;
        let wrapped = d.sin().atan2(d.cos());
        assert!(wrapped.abs() < 0.05, "state {m}: {wrapped}");
    }
}

#[test]
fn param_scaling_roundtrip_and_dimension() {
    let theta = CalibParams::from_perturbation(&presets::perturbed_truth());
    assert_eq!(theta.dim(), 10);
    let back = CalibParams::from_scaled(&theta.to_scaled());
    assert_relative_eq!(back.tau0_s, theta.tau0_s, max_relative = 1e-15);
    assert!(back.max_offset_error_m(&theta) < 1e-18);
    // tilt·(ν − ½) expressed as a quadratic
    for nu in [0.0, 0.3, 1.0] {
        assert_relative_eq!(theta.gain_db(nu), nu - 0.5, epsilon = 1e-15);
    }
}

#[test]
fn fit_report_json_roundtrip() {
    let report = FitReport {
        theta_hat: CalibParams::nominal(1),
        residual_history: vec![2.0, 1.0],
        converged: true,
        iterations: 1,
        acquired_tau0_s: Some(0.0),
        diagnostic: None,
        warnings: vec![],
    };
    let back: FitReport = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(back, report);
}
