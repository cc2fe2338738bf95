//! Dechirped beat-signal synthesis for point targets seen through the fabric.
//!
//! Each frequency state `m` radiates from one virtual sample `x(f_c[m])`.
//! A target at range `R` from that sample contributes the tone
//!
//! ```text
//! a · exp(j2π f_b t) · exp(−j4π f_c R / c) · exp(−j2π f_c τ0),   f_b = 2 S R / c
//! ```
//!
//! where fast time `t` is measured from the chirp center. The amplitude `a`
//! is set from the monostatic `R⁻⁴` law so that the post-FFT peak SNR (with
//! the configured processing window) matches [`radar_snr`] including the
//! active module's loss.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{range_profile, ChirpTiming, DspError, RangeFftConfig, RangeProfile, Window};
use crate::fabric::{FabricConfig, FabricError, PerturbationState};
use crate::schedule::{validate_guard_gaps, ChirpSchedule, GuardBudget, ScheduleError};
use crate::{Complex64, Vec3, SPEED_OF_LIGHT};

/// RCS (m²) at which a target reaches `reference_snr_db` at the reference range.
pub const REFERENCE_RCS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error("target {index} reaches {range_m:.3} m, beyond R_max = {r_max_m} m")]
    TargetOutOfRange { index: usize, range_m: f64, r_max_m: f64 },
    #[error("target {index}: {reason}")]
    InvalidTarget { index: usize, reason: String },
    #[error("guard gap violated: margin {margin_s:e} s")]
    GuardViolation { margin_s: f64 },
    #[error("invalid noise spec: {0}")]
    InvalidNoise(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub position: Vec3,
    /// Radar cross section in m².
    pub rcs: f64,
    /// Radial velocity along the line of sight from the virtual sample;
    /// positive means receding.
    #[serde(default)]
    pub radial_velocity: f64,
}

impl Target {
    pub fn fixed(position: Vec3, rcs: f64) -> Self {
        Self {
            position,
            rcs,
            radial_velocity: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Post-FFT SNR of a reference-RCS target at `reference_range_m` with no loss.
    pub reference_snr_db: f64,
    pub reference_range_m: f64,
    pub seed: u64,
    /// Skip noise injection; amplitudes are still scaled as if noise existed.
    #[serde(default)]
    pub noiseless: bool,
}

impl NoiseSpec {
    fn validate(&self) -> Result<(), SynthesisError> {
        if !(self.reference_range_m > 0.0) || !self.reference_snr_db.is_finite() {
            return Err(SynthesisError::InvalidNoise(format!(
                "reference range must be > 0 and SNR finite, got {} m / {} dB",
                self.reference_range_m, self.reference_snr_db
            )));
        }
        Ok(())
    }
}

/// `reference_snr_db + 40·log10(R_ref / R) − extra_loss_db`.
pub fn radar_snr(range_m: f64, spec: &NoiseSpec, extra_loss_db: f64) -> f64 {
    spec.reference_snr_db + 40.0 * (spec.reference_range_m / range_m).log10() - extra_loss_db
}

/// Range-profile peak amplitude of a reference-RCS target at unit range
/// with no loss, given the processing window and record length.
///
/// A target's on-bin profile value has magnitude
/// `scale · 10^(−loss/20) · 10^(gain/20) · √σ / R²`.
pub fn profile_amplitude_scale(noise: &NoiseSpec, window: Window, n_samples: usize) -> f64 {
    let (_, w2) = window.sums(n_samples);
    10f64.powf(noise.reference_snr_db / 20.0) * noise.reference_range_m.powi(2) * (w2 / n_samples as f64).sqrt()
        / REFERENCE_RCS.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub r_max_m: f64,
    pub t_ringing_s: f64,
    pub t_multipath_s: f64,
    /// Processing the SNR calibration refers to.
    pub processing: RangeFftConfig,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            r_max_m: 5.0,
            t_ringing_s: 50e-9,
            t_multipath_s: 100e-9,
            processing: RangeFftConfig::default(),
        }
    }
}

impl SynthesisConfig {
    pub fn guard_budget(&self) -> GuardBudget {
        GuardBudget::from_max_range(self.r_max_m, self.t_ringing_s, self.t_multipath_s)
    }
}

/// Complex beat samples indexed `(state, evolution, fast-time)` in C order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataCube {
    pub num_states: usize,
    pub evolutions: usize,
    pub fast_time: usize,
    pub samples: Vec<Complex64>,
    pub schedule: ChirpSchedule,
    pub fabric_hash: String,
    pub seed: u64,
}

impl RawDataCube {
    pub fn slice(&self, state: usize, evolution: usize) -> &[Complex64] {
        let start = (state * self.evolutions + evolution) * self.fast_time;
        &self.samples[start..start + self.fast_time]
    }

    pub fn timing(&self, state: usize) -> ChirpTiming {
        let c = self.schedule.state(state);
        ChirpTiming {
            f_center: c.f_center,
            slope: c.slope(),
            sample_rate: c.sample_rate,
        }
    }

    pub fn range_profile(&self, state: usize, evolution: usize, cfg: RangeFftConfig) -> Result<RangeProfile, DspError> {
        range_profile(self.slice(state, evolution), state, self.timing(state), cfg)
    }

    /// One profile per state for a single evolution.
    pub fn range_profiles(&self, evolution: usize, cfg: RangeFftConfig) -> Result<Vec<RangeProfile>, DspError> {
        (0..self.num_states)
            .into_par_iter()
            .map(|m| self.range_profile(m, evolution, cfg))
            .collect()
    }

    /// Profiles of one state across all evolutions (slow time).
    pub fn slow_time_profiles(&self, state: usize, cfg: RangeFftConfig) -> Result<Vec<RangeProfile>, DspError> {
        (0..self.evolutions)
            .map(|q| self.range_profile(state, q, cfg))
            .collect()
    }

    /// Elementwise sum of two cubes with identical layout.
    pub fn superpose(&self, other: &RawDataCube) -> RawDataCube {
        assert_eq!(self.samples.len(), other.samples.len(), "cube shapes differ");
        let mut out = self.clone();
        for (a, b) in out.samples.iter_mut().zip(&other.samples) {
            *a += b;
        }
        out
    }

    pub fn header_text(&self) -> String {
        format!(
            "format = f32le interleaved re/im, C-order (state, evolution, sample)\n\
             num_states = {}\nevolutions = {}\nfast_time = {}\n\
             schedule_sha256 = {}\nfabric_sha256 = {}\nseed = {}\n",
            self.num_states,
            self.evolutions,
            self.fast_time,
            self.schedule.content_hash(),
            self.fabric_hash,
            self.seed
        )
    }

    pub fn to_f32_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.samples.len() * 8);
        for s in &self.samples {
            out.extend_from_slice(&(s.re as f32).to_le_bytes());
            out.extend_from_slice(&(s.im as f32).to_le_bytes());
        }
        out
    }

    /// Writes `<stem>.bin` and its `<stem>.hdr` sidecar.
    pub fn write_binary(&self, dir: &Path, stem: &str) -> std::io::Result<()> {
        std::fs::write(dir.join(format!("{stem}.bin")), self.to_f32_bytes())?;
        std::fs::write(dir.join(format!("{stem}.hdr")), self.header_text())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["state", "evolution", "sample", "real", "imag"])?;
        for m in 0..self.num_states {
            for q in 0..self.evolutions {
                for (n, s) in self.slice(m, q).iter().enumerate() {
                    wtr.serialize((m, q, n, s.re, s.im))?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Per-(state, evolution) noise stream, independent of evaluation order.
fn noise_rng(seed: u64, state: usize, evolution: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((state as u64) << 32) | evolution as u64);
    rng
}

pub fn synthesize_beat(
    schedule: &ChirpSchedule,
    fabric: &FabricConfig,
    truth: &PerturbationState,
    scene: &[Target],
    noise: &NoiseSpec,
    config: &SynthesisConfig,
) -> Result<RawDataCube, SynthesisError> {
    noise.validate()?;
    truth.validate(fabric)?;
    let report = validate_guard_gaps(schedule, &config.guard_budget());
    if !report.passed {
        return Err(SynthesisError::GuardViolation {
            margin_s: report.margin_s,
        });
    }
    schedule.check_sampling(config.r_max_m)?;

    let m_states = schedule.num_states;
    let evolutions = schedule.evolutions;
    let n = schedule.fast_time_len();
    let pri = schedule.pri();
    let (w_sum, w2_sum) = config.processing.window.sums(n);
    let amp_per_snr = w2_sum.sqrt() / w_sum;

    // per-state geometry and amplitude for each target
    struct Echo {
        base_range: f64,
        velocity: f64,
        amplitude: f64,
    }
    let mut states = Vec::with_capacity(m_states);
    for m in 0..m_states {
        let chirp = schedule.state(m);
        let f = chirp.f_center;
        let x = fabric.perturbed_map(truth, f)?;
        let loss = fabric.loss_at(f)?;
        let gain = truth.gain_db(schedule.band.normalized(f));
        let mut echoes = Vec::with_capacity(scene.len());
        for (i, t) in scene.iter().enumerate() {
            if !(t.rcs > 0.0) {
                return Err(SynthesisError::InvalidTarget {
                    index: i,
                    reason: format!("rcs must be > 0, got {}", t.rcs),
                });
            }
            let base_range = (t.position - x).norm();
            let furthest = base_range + (t.radial_velocity * pri * (evolutions - 1) as f64).max(0.0);
            if furthest > config.r_max_m || base_range <= 0.0 {
                return Err(SynthesisError::TargetOutOfRange {
                    index: i,
                    range_m: furthest,
                    r_max_m: config.r_max_m,
                });
            }
            let snr_db = radar_snr(base_range, noise, loss) + 10.0 * (t.rcs / REFERENCE_RCS).log10() + gain;
            echoes.push(Echo {
                base_range,
                velocity: t.radial_velocity,
                amplitude: 10f64.powf(snr_db / 20.0) * amp_per_snr,
            });
        }
        states.push(echoes);
    }

    let tau0 = truth.delay_offset_s;
    let center = 0.5 * (n - 1) as f64;
    let mut samples = vec![Complex64::new(0.0, 0.0); m_states * evolutions * n];
    samples.par_chunks_mut(n).enumerate().for_each(|(idx, out)| {
        let m = idx / evolutions;
        let q = idx % evolutions;
        let chirp = schedule.chirp(m, q);
        let f = chirp.f_center;
        let slope = chirp.slope();
        let fs = chirp.sample_rate;
        for e in &states[m] {
            // stop-and-hop: range frozen within a chirp
            let r = e.base_range + e.velocity * q as f64 * pri;
            let f_b = 2.0 * slope * r / SPEED_OF_LIGHT;
            let phase0 = -4.0 * std::f64::consts::PI * f * r / SPEED_OF_LIGHT - std::f64::consts::TAU * f * tau0;
            for (i, s) in out.iter_mut().enumerate() {
                let t = (i as f64 - center) / fs;
                *s += Complex64::from_polar(e.amplitude, phase0 + std::f64::consts::TAU * f_b * t);
            }
        }
        if !noise.noiseless {
            let mut rng = noise_rng(noise.seed, m, q);
            let sd = std::f64::consts::FRAC_1_SQRT_2;
            for s in out.iter_mut() {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                *s += Complex64::new(re * sd, im * sd);
            }
        }
    });

    Ok(RawDataCube {
        num_states: m_states,
        evolutions,
        fast_time: n,
        samples,
        schedule: schedule.clone(),
        fabric_hash: fabric.content_hash(),
        seed: noise.seed,
    })
}
