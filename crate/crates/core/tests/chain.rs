//! Cross-module checks: synthesis against the radar law and the budget,
//! echo/kernel conjugacy, range resolution, calibration identifiability
//! and end-to-end determinism.

use aperture_fabric::budget::budget_report;
use aperture_fabric::calibration::{fit_calibration, measure_references, synthesize_references, CalibParams};
use aperture_fabric::dsp::{RangeFftConfig, RangeProfile, UsableSet};
use aperture_fabric::echo::{radar_snr, synthesize_beat, SynthesisConfig};
use aperture_fabric::imaging::focus_kernel;
use aperture_fabric::pipeline::{self, Prepared, RunOptions};
use aperture_fabric::scenario::SHIPPED;
use aperture_fabric::{
    presets, FabricConfig, LossComponents, NoiseSpec, PerturbationState, RippleProfile, Scenario, Target, Vec3,
    SPEED_OF_LIGHT,
};

fn noise(seed: u64) -> NoiseSpec {
    NoiseSpec {
        reference_snr_db: 20.0,
        reference_range_m: 3.0,
        seed,
        noiseless: false,
    }
}

/// Noise-subtracted peak SNR per state, linearly averaged over seeds.
fn measured_snr_db(fabric: &FabricConfig, states: usize, range: f64, seeds: u64) -> Vec<f64> {
    let schedule = presets::schedule(states, 1);
    let synth = SynthesisConfig {
        r_max_m: 7.0,
        ..Default::default()
    };
    let target = Target::fixed(Vec3::new(0.0, range, 0.0), 1.0);
    let mut acc = vec![0.0; states];
    for seed in 0..seeds {
        let cube = synthesize_beat(
            &schedule,
            fabric,
            &PerturbationState::none(2),
            &[target],
            &noise(seed),
            &synth,
        )
        .unwrap();
        for p in cube.range_profiles(0, synth.processing).unwrap() {
            acc[p.state] += (p.peak().1 - p.noise_floor) / p.noise_floor / seeds as f64;
        }
    }
    acc.iter().map(|v| 10.0 * v.log10()).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn doubling_range_costs_twelve_db() {
    let fabric = presets::ideal_fabric();
    let near = mean(&measured_snr_db(&fabric, 8, 1.5, 100));
    let far = mean(&measured_snr_db(&fabric, 8, 3.0, 100));
    let drop = near - far;
    assert!((drop - 12.04).abs() <= 0.3, "drop {drop:.3} dB");
}

#[test]
fn budget_matches_simulated_snr() {
    // fixed losses only: the reference-range figure is directly observable
    let losses = LossComponents {
        ripple_db_peak: 0.0,
        ..presets::BOX_LOSSES
    };
    let fabric = presets::fabric(losses, RippleProfile::default());
    let measured = mean(&measured_snr_db(&fabric, 8, 3.0, 100));
    let report = budget_report(&aperture_fabric::BudgetInput {
        losses,
        baseline_snr_db: 20.0,
        reference_range_m: 3.0,
        baseline_max_range_m: 5.0,
        num_states: 8,
        threshold_db: 10.0,
        per_state_ripple_db: vec![0.0; 8],
    })
    .unwrap();
    assert!(
        (measured - report.snr_at_reference_db).abs() <= 1.0,
        "{measured} vs {}",
        report.snr_at_reference_db
    );

    // with ripple, each state follows baseline − fixed − ripple(f)
    let fabric = presets::fabric(presets::BOX_LOSSES, presets::ripple_fixture());
    let schedule = presets::schedule(8, 1);
    let measured = measured_snr_db(&fabric, 8, 3.0, 100);
    for (m, f) in schedule.state_frequencies().into_iter().enumerate() {
        let x = fabric.nominal_map(f).unwrap();
        let want = radar_snr(3.0, &noise(0), fabric.loss_at(f).unwrap())
            + 40.0 * (3.0 / (Vec3::new(0.0, 3.0, 0.0) - x).norm()).log10();
        assert!(
            (measured[m] - want).abs() <= 1.0,
            "state {m}: {} vs {want}",
            measured[m]
        );
    }
}

#[test]
fn budget_m_eff_matches_dsp_usable_set() {
    let scenario = Scenario::shipped("budget-example").unwrap();
    let p = Prepared::new(&scenario, &RunOptions::default()).unwrap();
    let report = budget_report(&scenario.budget_input(&p.resolved).unwrap()).unwrap();
    let processed = pipeline::process(&p, &pipeline::simulate(&p).unwrap()).unwrap();
    assert_eq!(report.m_eff, 44);
    assert_eq!(processed.usable.len(), report.m_eff);
    let below: Vec<usize> = (0..64).filter(|m| !processed.usable.contains(*m)).collect();
    assert_eq!(below, report.below_threshold);
}

#[test]
fn echo_phase_is_conjugate_to_focusing_kernel() {
    let fabric = presets::ideal_fabric();
    let schedule = presets::schedule(64, 1);
    let target = Target::fixed(Vec3::new(0.07, 0.9, 0.02), 1.0);
    let n = NoiseSpec {
        noiseless: true,
        ..noise(0)
    };
    let cube = synthesize_beat(
        &schedule,
        &fabric,
        &PerturbationState::none(2),
        &[target],
        &n,
        &SynthesisConfig::default(),
    )
    .unwrap();
    for p in cube.range_profiles(0, RangeFftConfig::default()).unwrap() {
        let r = (target.position - fabric.nominal_map(p.timing.f_center).unwrap()).norm();
        let z = p.interpolate(r) * focus_kernel(p.timing.f_center, r);
        assert!(z.arg().abs() < 1e-6, "state {}: residual phase {}", p.state, z.arg());
    }
}

fn local_maxima(p: &RangeProfile) -> Vec<usize> {
    let mag: Vec<f64> = p.bins.iter().map(|b| b.norm()).collect();
    let peak = mag.iter().copied().fold(0.0, f64::max);
    (1..mag.len() - 1)
        .filter(|&k| mag[k] > mag[k - 1] && mag[k] >= mag[k + 1] && mag[k] > 0.5 * peak)
        .collect()
}

#[test]
fn targets_one_and_a_half_resolution_cells_apart_are_resolved() {
    let fabric = presets::ideal_fabric();
    let schedule = presets::schedule(4, 1);
    let cell = SPEED_OF_LIGHT / (2.0 * schedule.chirp_bandwidth());
    let (near, far) = (1.5, 1.5 + 1.5 * cell);
    // equal echo amplitudes: compensate the R⁻⁴ law through RCS
    let scene = [
        Target::fixed(Vec3::new(0.0, near, 0.0), 1.0),
        Target::fixed(Vec3::new(0.0, far, 0.0), (far / near).powi(4)),
    ];
    let n = NoiseSpec {
        noiseless: true,
        ..noise(0)
    };
    let cube = synthesize_beat(
        &schedule,
        &fabric,
        &PerturbationState::none(2),
        &scene,
        &n,
        &SynthesisConfig::default(),
    )
    .unwrap();
    // the c/2B cell refers to the untapered response
    let cfg = RangeFftConfig {
        window: aperture_fabric::Window::Rectangular,
        zero_pad: 4,
    };
    for p in cube.range_profiles(0, cfg).unwrap() {
        assert_eq!(local_maxima(&p).len(), 2, "state {}", p.state);
    }
}

#[test]
fn shipped_scenarios_are_overdetermined() {
    for (name, _) in SHIPPED {
        let scenario = Scenario::shipped(name).unwrap();
        let p = Prepared::new(&scenario, &RunOptions::default()).unwrap();
        let k = p.resolved.fabric.modules.len();
        let processed = pipeline::process(&p, &pipeline::simulate(&p).unwrap()).unwrap();
        let residuals = 2 * 3 * processed.usable.len();
        assert!(residuals >= 4 * (4 + 3 * k), "{name}: {residuals} residuals");
    }
}

#[test]
fn sparse_measurement_triggers_warning() {
    let fabric = presets::ideal_fabric();
    let schedule = presets::schedule(8, 1);
    let refs = aperture_fabric::calibration::default_references(&fabric);
    let n = NoiseSpec {
        noiseless: true,
        ..noise(0)
    };
    let synth = SynthesisConfig::default();
    let cube = synthesize_references(&schedule, &fabric, &PerturbationState::none(2), &refs, &n, &synth).unwrap();
    let opts = aperture_fabric::calibration::CalibOptions::default();
    // two states per module: 24 real residuals for 10 parameters
    let usable = UsableSet {
        members: vec![0, 3, 4, 7],
        threshold_db: 0.0,
    };
    let meas = measure_references(&cube, &fabric, &refs, &usable, &n, &opts).unwrap();
    let fit = fit_calibration(&meas, &fabric, &refs, &CalibParams::nominal(2), &opts).unwrap();
    assert!(!fit.warnings.is_empty());
}

#[test]
fn calibration_improves_focus_at_target() {
    let scenario = Scenario::shipped("perturbed-vs-nominal").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = pipeline::run_e2e(&scenario, &RunOptions::default(), dir.path()).unwrap();
    let (calibrated, nominal) = r.peak_at_target.unwrap();
    assert!(calibrated > nominal, "{calibrated} vs {nominal}");
}

#[test]
fn nominal_noiseless_localizes_within_grid_quantization() {
    let scenario = Scenario::shipped("nominal-noiseless").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = pipeline::run_e2e(&scenario, &RunOptions::default(), dir.path()).unwrap();
    assert!(r.localization_error_m.unwrap() <= scenario.grid.quantization_bound());
}

#[test]
fn e2e_runs_are_byte_identical() {
    let scenario = Scenario::shipped("perturbed-vs-nominal").unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = pipeline::run_e2e(&scenario, &RunOptions::default(), a.path()).unwrap();
    let rb = pipeline::run_e2e(&scenario, &RunOptions::default(), b.path()).unwrap();
    assert_eq!(
        serde_json::to_string(&ra.manifest).unwrap(),
        serde_json::to_string(&rb.manifest).unwrap()
    );
    for entry in &ra.manifest.files {
        let x = std::fs::read(a.path().join(&entry.path)).unwrap();
        let y = std::fs::read(b.path().join(&entry.path)).unwrap();
        assert_eq!(x, y, "{}", entry.path);
    }
}

#[test]
fn manifest_lists_every_output() {
    let scenario = Scenario::shipped("budget-example").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = pipeline::run_e2e(&scenario, &RunOptions::default(), dir.path()).unwrap();
    let mut on_disk: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    on_disk.sort();
    let listed: Vec<String> = r.manifest.files.iter().map(|e| e.path.clone()).collect();
    assert_eq!(on_disk, listed);
    for name in [
        "schedule.csv",
        "cube.bin",
        "fit_report.json",
        "image.pgm",
        "metrics.txt",
        "budget.csv",
        "summary.txt",
    ] {
        assert!(listed.iter().any(|l| l == name), "{name} missing");
    }
    assert_eq!(r.manifest.config_sha256, scenario.content_hash());
}
