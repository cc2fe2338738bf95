//! Ready-made configurations shared by the shipped scenarios, tests and
//! benchmarks.
//!
//! The standard fabric has two clip-on modules on the x axis, anchored at
//! `x = ∓0.1 m`, each with a 4 cm aperture scanning along +x and facing +y.
//! The band 60–66 GHz is split into two subbands with a 100 MHz guard.

use crate::fabric::{
    ClipOnModule, FabricConfig, LossComponents, PerturbationState, RippleComponent, RippleProfile, ScanLaw,
};
use crate::schedule::{assign_subbands, build_schedule, Band, ChirpSchedule, ScheduleParams};
use crate::Vec3;

pub const BAND_LO_HZ: f64 = 60e9;
pub const BAND_HI_HZ: f64 = 66e9;
pub const GUARD_BAND_HZ: f64 = 100e6;
pub const MODULE_SPACING_M: f64 = 0.2;
pub const APERTURE_LENGTH_M: f64 = 0.04;

/// Loss terms of the reference link-budget example (dB).
pub const BOX_LOSSES: LossComponents = LossComponents {
    coupling_db: 4.0,
    guided_wave_db: 1.0,
    insertion_db: 2.0,
    ripple_db_peak: 1.0,
};

/// Ripple peak of the per-state fixture (dB).
pub const FIXTURE_RIPPLE_PEAK_DB: f64 = 10.0;

pub fn band() -> Band {
    Band::new(BAND_LO_HZ, BAND_HI_HZ).expect("static band is valid")
}

/// Two-term ripple profile whose per-state values over the standard
/// 64-state schedule put exactly 20 states at or above 3 dB of ripple when
/// scaled to a 10 dB peak.
pub fn ripple_fixture() -> RippleProfile {
    RippleProfile {
        components: vec![
            RippleComponent {
                amplitude: 1.0,
                period_hz: 275e6,
                phase_rad: 1.0,
            },
            RippleComponent {
                amplitude: 0.2,
                period_hz: 3.1e9,
                phase_rad: 2.7,
            },
        ],
    }
}

/// Standard two-module fabric with the given per-module losses and ripple.
pub fn fabric(losses: LossComponents, ripple: RippleProfile) -> FabricConfig {
    let subs = assign_subbands(band(), 2, GUARD_BAND_HZ).expect("static split is feasible");
    let modules = subs
        .iter()
        .enumerate()
        .map(|(i, &passband)| ClipOnModule {
            id: i,
            anchor: Vec3::new((i as f64 - 0.5) * MODULE_SPACING_M, 0.0, 0.0),
            axis: Vec3::x(),
            aperture_length: APERTURE_LENGTH_M,
            passband,
            losses,
            scan_law: ScanLaw::Linear,
        })
        .collect();
    FabricConfig::new(modules, Vec3::zeros(), ripple).expect("static fabric is valid")
}

/// Lossless, ripple-free standard fabric.
pub fn ideal_fabric() -> FabricConfig {
    fabric(LossComponents::default(), RippleProfile::default())
}

/// Standard fabric carrying the per-state ripple fixture.
pub fn fixture_fabric() -> FabricConfig {
    fabric(
        LossComponents {
            ripple_db_peak: FIXTURE_RIPPLE_PEAK_DB,
            ..BOX_LOSSES
        },
        ripple_fixture(),
    )
}

/// Schedule over the standard fabric's subbands.
pub fn schedule(num_states: usize, evolutions: usize) -> ChirpSchedule {
    let subs = assign_subbands(band(), 2, GUARD_BAND_HZ).expect("static split is feasible");
    let params = ScheduleParams {
        num_states,
        evolutions,
        ..Default::default()
    };
    build_schedule(band(), &subs, &params).expect("standard schedule is valid")
}

/// Attachment perturbation used throughout the calibration studies:
/// `τ0 = 0.2 ns`, 1 dB gain tilt, 0.5 mm offset of module 0.
pub fn perturbed_truth() -> PerturbationState {
    let mut p = PerturbationState::none(2);
    p.delay_offset_s = 0.2e-9;
    p.gain_tilt_db = 1.0;
    p.module_offsets[0] = Vec3::new(0.3e-3, 0.4e-3, 0.0);
    p
}
