//! Online self-calibration from three built-in reference scatterers.
//!
//! The parameter vector `θ` holds a global delay `τ0`, a quadratic gain
//! profile in dB over normalized frequency and one rigid offset per module.
//! Its size is `4 + 3K`, independent of the number of frequency states.
//!
//! References sit a few centimetres from the fabric, far inside one range
//! resolution cell, so every measured bin mixes all three echoes. The
//! measurement model therefore sums each reference's response through the
//! window kernel at the sampled bin rather than assuming isolated peaks.

pub mod lm;

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{window_response, ChirpTiming, DspError, RangeFftConfig, RangeProfile, UsableSet, Window};
use crate::echo::{
    profile_amplitude_scale, synthesize_beat, NoiseSpec, RawDataCube, SynthesisConfig, SynthesisError, Target,
};
use crate::fabric::{FabricConfig, FabricError, PerturbationState};
use crate::schedule::{Band, ChirpSchedule};
use crate::{Complex64, Vec3, SPEED_OF_LIGHT};

use self::lm::{LmOptions, LmOutcome};

/// Natural unit of `τ0` in the solver (1 ps).
pub const TAU_SCALE_S: f64 = 1e-12;
/// Natural unit of the gain coefficients (0.01 dB).
pub const GAIN_SCALE_DB: f64 = 0.01;
/// Natural unit of module offsets (10 µm).
pub const OFFSET_SCALE_M: f64 = 10e-6;

/// Minimum angle between two references as seen from the fabric centroid.
const MIN_BEARING_SEPARATION_DEG: f64 = 5.0;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error("invalid reference set: {0}")]
    InvalidReferences(String),
    #[error(
        "references {a} and {b} are {separation_m:.4} m apart in range at state {state}, \
         below the {bin_m:.4} m bin spacing; use a wider chirp, more zero padding or more distinct ranges"
    )]
    Unresolvable {
        state: usize,
        a: usize,
        b: usize,
        separation_m: f64,
        bin_m: f64,
    },
    #[error("module {module_id} has {count} usable states; calibration needs at least 2")]
    TooFewStates { module_id: usize, count: usize },
    #[error("parameter vector lists {got} module offsets, fabric has {expected} modules")]
    ParamDimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceScatterer {
    /// 1, 2 or 3.
    pub id: usize,
    pub position: Vec3,
    /// m².
    pub rcs: f64,
}

/// Default reference layout around the fabric centroid: (range m, azimuth°, elevation°).
///
/// Azimuth is measured from +y toward +x, elevation toward +z.
pub const DEFAULT_REFERENCE_LAYOUT: [(f64, f64, f64); 3] =
    [(0.10, 65.0, 5.0), (0.15, -65.0, -20.0), (0.20, 55.0, -25.0)];

/// Default RCS of each reference (m²).
pub const DEFAULT_REFERENCE_RCS: f64 = 1e-2;

/// Host-enclosure references placed per [`DEFAULT_REFERENCE_LAYOUT`].
pub fn default_references(fabric: &FabricConfig) -> Vec<ReferenceScatterer> {
    let c = fabric.centroid();
    DEFAULT_REFERENCE_LAYOUT
        .iter()
        .enumerate()
        .map(|(i, &(r, az, el))| {
            let (az, el) = (az.to_radians(), el.to_radians());
            let dir = Vec3::new(az.sin() * el.cos(), az.cos() * el.cos(), el.sin());
            ReferenceScatterer {
                id: i + 1,
                position: c + dir * r,
                rcs: DEFAULT_REFERENCE_RCS,
            }
        })
        .collect()
}

/// Exactly three references with ids 1..=3, positive RCS and bearings from
/// the fabric centroid at least 5° apart.
pub fn validate_references(refs: &[ReferenceScatterer], fabric: &FabricConfig) -> Result<(), CalibrationError> {
    let bad = |s: String| Err(CalibrationError::InvalidReferences(s));
    if refs.len() != 3 {
        return bad(format!("exactly three references required, got {}", refs.len()));
    }
    let mut ids: Vec<usize> = refs.iter().map(|r| r.id).collect();
    ids.sort_unstable();
    if ids != [1, 2, 3] {
        return bad(format!("reference ids must be 1, 2, 3, got {ids:?}"));
    }
    let c = fabric.centroid();
    for r in refs {
        if !(r.rcs > 0.0) {
            return bad(format!("reference {} has rcs {}", r.id, r.rcs));
        }
        if (r.position - c).norm() < 1e-9 {
            return bad(format!("reference {} sits on the fabric centroid", r.id));
        }
    }
    for i in 0..3 {
        for j in i + 1..3 {
            let (a, b) = (refs[i].position - c, refs[j].position - c);
            let cos = (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0);
            let angle = cos.acos().to_degrees();
            if !(MIN_BEARING_SEPARATION_DEG..=180.0 - MIN_BEARING_SEPARATION_DEG).contains(&angle) {
                return bad(format!(
                    "references {} and {} are collinear with the centroid ({angle:.2}°)",
                    refs[i].id, refs[j].id
                ));
            }
        }
    }
    Ok(())
}

/// Low-dimensional calibration vector in SI units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibParams {
    pub tau0_s: f64,
    /// `(g0, g1, g2)`: gain in dB is `g0 + g1·ν + g2·ν²`.
    pub gain_coeffs: [f64; 3],
    pub module_offsets: Vec<Vec3>,
}

impl CalibParams {
    pub fn nominal(num_modules: usize) -> Self {
        Self {
            tau0_s: 0.0,
            gain_coeffs: [0.0; 3],
            module_offsets: vec![Vec3::zeros(); num_modules],
        }
    }

    /// The parameters that reproduce a synthesis perturbation exactly.
    pub fn from_perturbation(p: &PerturbationState) -> Self {
        Self {
            tau0_s: p.delay_offset_s,
            gain_coeffs: [-0.5 * p.gain_tilt_db, p.gain_tilt_db, 0.0],
            module_offsets: p.module_offsets.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        4 + 3 * self.module_offsets.len()
    }

    pub fn gain_db(&self, nu: f64) -> f64 {
        let [g0, g1, g2] = self.gain_coeffs;
        g0 + nu * (g1 + nu * g2)
    }

    /// Parameters in solver units.
    pub fn to_scaled(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim());
        x.push(self.tau0_s / TAU_SCALE_S);
        x.extend(self.gain_coeffs.iter().map(|g| g / GAIN_SCALE_DB));
        for d in &self.module_offsets {
            x.extend(d.iter().map(|v| v / OFFSET_SCALE_M));
        }
        x
    }

    pub fn from_scaled(x: &[f64]) -> Self {
        let module_offsets = x[4..]
            .chunks_exact(3)
            .map(|c| Vec3::new(c[0], c[1], c[2]) * OFFSET_SCALE_M)
            .collect();
        Self {
            tau0_s: x[0] * TAU_SCALE_S,
            gain_coeffs: [x[1] * GAIN_SCALE_DB, x[2] * GAIN_SCALE_DB, x[3] * GAIN_SCALE_DB],
            module_offsets,
        }
    }

    /// Largest gain-profile difference over `ν ∈ [0, 1]` (dB), sampled finely.
    pub fn max_gain_error_db(&self, other: &CalibParams) -> f64 {
        (0..=1000)
            .map(|i| {
                let nu = i as f64 / 1000.0;
                (self.gain_db(nu) - other.gain_db(nu)).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Largest per-module offset difference (m).
    pub fn max_offset_error_m(&self, other: &CalibParams) -> f64 {
        self.module_offsets
            .iter()
            .zip(&other.module_offsets)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Calibration-pass processing and solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibOptions {
    /// Range processing for the reference pass; heavy zero padding keeps
    /// the centimetre-spaced references on distinct bins.
    pub processing: RangeFftConfig,
    /// Grid-search `τ0` before the local fit.
    pub acquire_delay: bool,
    pub delay_scan_halfwidth_s: f64,
    pub delay_scan_step_s: f64,
    #[serde(skip)]
    pub lm: LmOptions,
}

impl Default for CalibOptions {
    fn default() -> Self {
        Self {
            processing: RangeFftConfig {
                window: Window::Hann,
                zero_pad: 64,
            },
            acquire_delay: true,
            delay_scan_halfwidth_s: 2e-9,
            delay_scan_step_s: 10e-12,
            lm: LmOptions::default(),
        }
    }
}

/// Reference samples of one frequency state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMeasurement {
    pub state: usize,
    pub timing: ChirpTiming,
    /// Nominal loss at this state (dB).
    pub loss_db: f64,
    /// Sampled bin per reference.
    pub bins: [usize; 3],
    /// `S_cal^(p)` per reference, averaged over evolutions.
    pub values: [Complex64; 3],
}

/// Complete grid of reference responses over the usable states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibMeasurement {
    pub band: Band,
    pub window: Window,
    pub n_samples: usize,
    pub nfft: usize,
    /// Profile amplitude of a reference-RCS target at 1 m with no loss.
    pub amplitude_scale: f64,
    pub states: Vec<StateMeasurement>,
}

impl CalibMeasurement {
    /// Number of real residual equations.
    pub fn residual_count(&self) -> usize {
        2 * 3 * self.states.len()
    }
}

/// Synthesizes the dedicated calibration pass: the three references alone.
pub fn synthesize_references(
    schedule: &ChirpSchedule,
    fabric: &FabricConfig,
    truth: &PerturbationState,
    refs: &[ReferenceScatterer],
    noise: &NoiseSpec,
    config: &SynthesisConfig,
) -> Result<RawDataCube, CalibrationError> {
    validate_references(refs, fabric)?;
    let scene: Vec<Target> = refs.iter().map(|r| Target::fixed(r.position, r.rcs)).collect();
    Ok(synthesize_beat(schedule, fabric, truth, &scene, noise, config)?)
}

/// Complex response of each reference per the calibration model, without
/// window or system scaling:
/// `10^{A(ν)/20} · √σ / R² · exp(−j4π f R / c − j2π f τ0)`.
pub fn model_reference_response(
    theta: &CalibParams,
    fabric: &FabricConfig,
    refs: &[ReferenceScatterer],
    band: &Band,
    f: f64,
) -> Result<Vec<Complex64>, CalibrationError> {
    let x = calibrated_map(theta, fabric, f)?;
    let gain = 10f64.powf(theta.gain_db(band.normalized(f)) / 20.0);
    Ok(refs
        .iter()
        .map(|r| {
            let range = (r.position - x).norm();
            scatterer_term(gain, r.rcs, range, f, theta.tau0_s)
        })
        .collect())
}

fn scatterer_term(gain: f64, rcs: f64, range: f64, f: f64, tau0: f64) -> Complex64 {
    let phase = -4.0 * PI * f * range / SPEED_OF_LIGHT - TAU * f * tau0;
    Complex64::from_polar(gain * rcs.sqrt() / (range * range), phase)
}

/// Reference pass measurement: per usable state, the evolution-averaged
/// range profile sampled at the bin nearest each reference's nominal range.
pub fn measure_references(
    cube: &RawDataCube,
    fabric_nominal: &FabricConfig,
    refs: &[ReferenceScatterer],
    usable: &UsableSet,
    noise: &NoiseSpec,
    opts: &CalibOptions,
) -> Result<CalibMeasurement, CalibrationError> {
    validate_references(refs, fabric_nominal)?;
    let cfg = opts.processing;
    let states: Vec<StateMeasurement> = usable
        .members
        .par_iter()
        .map(|&m| -> Result<StateMeasurement, CalibrationError> {
            let profile = averaged_profile(cube, m, cfg)?;
            let f = profile.timing.f_center;
            let x = fabric_nominal.nominal_map(f)?;
            let ranges: Vec<f64> = refs.iter().map(|r| (r.position - x).norm()).collect();
            let bin_m = profile.bin_spacing();
            for a in 0..3 {
                for b in a + 1..3 {
                    let sep = (ranges[a] - ranges[b]).abs();
                    if sep < bin_m {
                        return Err(CalibrationError::Unresolvable {
                            state: m,
                            a: refs[a].id,
                            b: refs[b].id,
                            separation_m: sep,
                            bin_m,
                        });
                    }
                }
            }
            let bins = [0, 1, 2].map(|p| profile.nearest_bin(ranges[p]));
            Ok(StateMeasurement {
                state: m,
                timing: profile.timing,
                loss_db: fabric_nominal.loss_at(f)?,
                bins,
                values: bins.map(|k| profile.bins[k]),
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(CalibMeasurement {
        band: cube.schedule.band,
        window: cfg.window,
        n_samples: cube.fast_time,
        nfft: cube.fast_time * cfg.zero_pad,
        amplitude_scale: profile_amplitude_scale(noise, cfg.window, cube.fast_time),
        states,
    })
}

fn averaged_profile(cube: &RawDataCube, m: usize, cfg: RangeFftConfig) -> Result<RangeProfile, DspError> {
    let mut acc = cube.range_profile(m, 0, cfg)?;
    for q in 1..cube.evolutions {
        let p = cube.range_profile(m, q, cfg)?;
        for (a, b) in acc.bins.iter_mut().zip(&p.bins) {
            *a += b;
        }
    }
    Ok(acc.scaled(Complex64::new(1.0 / cube.evolutions as f64, 0.0)))
}

/// Modeled measurement `S̃(p, m; θ)`: each reference's term, scaled by the
/// system amplitude and nominal loss, summed through the window kernel at
/// the bin sampled for reference `p`.
pub fn model_measurement(
    theta: &CalibParams,
    fabric: &FabricConfig,
    refs: &[ReferenceScatterer],
    meas: &CalibMeasurement,
) -> Result<Vec<[Complex64; 3]>, CalibrationError> {
    meas.states
        .iter()
        .map(|s| {
            let f = s.timing.f_center;
            let x = calibrated_map(theta, fabric, f)?;
            let gain = 10f64.powf(theta.gain_db(meas.band.normalized(f)) / 20.0);
            let scale = meas.amplitude_scale * 10f64.powf(-s.loss_db / 20.0);
            let mut out = [Complex64::new(0.0, 0.0); 3];
            for r in refs {
                let range = (r.position - x).norm();
                let term = scatterer_term(gain, r.rcs, range, f, theta.tau0_s) * scale;
                let beat = s.timing.beat_frequency(range) / s.timing.sample_rate;
                for (o, &k) in out.iter_mut().zip(&s.bins) {
                    let delta = beat - k as f64 / meas.nfft as f64;
                    *o += term * window_response(meas.window, meas.n_samples, delta);
                }
            }
            Ok(out)
        })
        .collect()
}

/// Real/imaginary residuals `S_cal − S̃`, state-major then reference.
pub fn residuals(
    theta: &CalibParams,
    fabric: &FabricConfig,
    refs: &[ReferenceScatterer],
    meas: &CalibMeasurement,
) -> Result<Vec<f64>, CalibrationError> {
    let model = model_measurement(theta, fabric, refs, meas)?;
    let mut r = Vec::with_capacity(meas.residual_count());
    for (s, m) in meas.states.iter().zip(&model) {
        for (v, w) in s.values.iter().zip(m) {
            let d = v - w;
            r.push(d.re);
            r.push(d.im);
        }
    }
    Ok(r)
}

/// `Σ_p Σ_m |S_cal − S̃|²`.
pub fn objective(
    theta: &CalibParams,
    fabric: &FabricConfig,
    refs: &[ReferenceScatterer],
    meas: &CalibMeasurement,
) -> Result<f64, CalibrationError> {
    Ok(residuals(theta, fabric, refs, meas)?.iter().map(|v| v * v).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub theta_hat: CalibParams,
    /// Objective at the start point and after each accepted step.
    pub residual_history: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Delay chosen by the acquisition scan, if it ran.
    pub acquired_tau0_s: Option<f64>,
    pub diagnostic: Option<String>,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn final_objective(&self) -> f64 {
        *self.residual_history.last().expect("history holds the start point")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Fits `θ` to the reference measurement by Levenberg–Marquardt.
///
/// A coarse `τ0` scan runs first when enabled, since delays beyond a
/// fraction of `1/B_total` leave the local basin.
pub fn fit_calibration(
    meas: &CalibMeasurement,
    fabric: &FabricConfig,
    refs: &[ReferenceScatterer],
    theta_init: &CalibParams,
    opts: &CalibOptions,
) -> Result<FitReport, CalibrationError> {
    validate_references(refs, fabric)?;
    let k = fabric.modules.len();
    if theta_init.module_offsets.len() != k {
        return Err(CalibrationError::ParamDimension {
            expected: k,
            got: theta_init.module_offsets.len(),
        });
    }
    for (i, module) in fabric.modules.iter().enumerate() {
        let count = meas
            .states
            .iter()
            .filter(|s| fabric.active_index(s.timing.f_center) == Some(i))
            .count();
        if count < 2 {
            return Err(CalibrationError::TooFewStates {
                module_id: module.id,
                count,
            });
        }
    }
    // states are validated above, so the map never leaves a passband
    let eval = |x: &[f64]| -> Vec<f64> {
        residuals(&CalibParams::from_scaled(x), fabric, refs, meas).expect("usable states lie in passbands")
    };

    let mut warnings = Vec::new();
    let dim = theta_init.dim();
    if meas.residual_count() < 4 * dim {
        warnings.push(format!(
            "only {} real residuals for {} parameters; fewer than 4 per parameter",
            meas.residual_count(),
            dim
        ));
    }

    let mut x0 = theta_init.to_scaled();
    let mut acquired = None;
    if opts.acquire_delay && opts.delay_scan_step_s > 0.0 {
        let steps = (opts.delay_scan_halfwidth_s / opts.delay_scan_step_s).round() as i64;
        let mut best = (f64::INFINITY, x0[0]);
        let mut x = x0.clone();
        for i in -steps..=steps {
            x[0] = theta_init.tau0_s / TAU_SCALE_S + (i as f64 * opts.delay_scan_step_s) / TAU_SCALE_S;
            let cost: f64 = eval(&x).iter().map(|v| v * v).sum();
            if cost < best.0 {
                best = (cost, x[0]);
            }
        }
        x0[0] = best.1;
        acquired = Some(best.1 * TAU_SCALE_S);
    }

    let LmOutcome {
        x,
        history,
        iterations,
        converged,
        diagnostic,
    } = lm::minimize(eval, &x0, &opts.lm);
    Ok(FitReport {
        theta_hat: CalibParams::from_scaled(&x),
        residual_history: history,
        converged,
        iterations,
        acquired_tau0_s: acquired,
        diagnostic,
        warnings,
    })
}

/// Applies the fitted delay and gain to one state's profile:
/// bins × `exp(+j2π f τ̂0) / 10^{Â(ν)/20}`.
pub fn normalize_state(profile: &RangeProfile, theta_hat: &CalibParams, band: &Band) -> RangeProfile {
    let f = profile.timing.f_center;
    let gain = 10f64.powf(theta_hat.gain_db(band.normalized(f)) / 20.0);
    profile.scaled(Complex64::from_polar(1.0 / gain, TAU * f * theta_hat.tau0_s))
}

/// Corrected frequency-to-space mapping `x̂(f)` using the fitted offsets.
pub fn calibrated_map(theta_hat: &CalibParams, fabric: &FabricConfig, f: f64) -> Result<Vec3, FabricError> {
    fabric.map_with_offsets(&theta_hat.module_offsets, f)
}

#[cfg(test)]
mod tests;
