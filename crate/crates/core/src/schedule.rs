//! Frequency-indexed FMCW chirp schedules.
//!
//! The band is split into one subband per clip-on module and `M` chirp
//! center frequencies are distributed over those subbands. Every chirp is
//! followed by an idle guard interval so that beat bursts from consecutive
//! frequency states cannot overlap at IF.

use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::SPEED_OF_LIGHT;

/// Absolute tolerance used when checking that a chirp span fits a subband.
const SPAN_TOLERANCE_HZ: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid band: f_lo = {f_lo} Hz, f_hi = {f_hi} Hz (need 0 < f_lo < f_hi)")]
    InvalidBand { f_lo: f64, f_hi: f64 },
    #[error("at least one subband is required")]
    NoSubbands,
    #[error("infeasible subband split: guard bands need {required_hz} Hz but only {available_hz} Hz is available")]
    InfeasibleSubbands { required_hz: f64, available_hz: f64 },
    #[error("subbands must be ascending, disjoint and inside the band (offending subband {index})")]
    InvalidSubbands { index: usize },
    #[error(
        "state {state}: chirp span [{span_lo}, {span_hi}] Hz does not fit subband [{sub_lo}, {sub_hi}) Hz of module {module_id}"
    )]
    ChirpExceedsSubband {
        state: usize,
        module_id: usize,
        span_lo: f64,
        span_hi: f64,
        sub_lo: f64,
        sub_hi: f64,
    },
    #[error("invalid schedule parameter: {0}")]
    InvalidParameter(String),
    #[error("sample rate {sample_rate_hz} Hz cannot represent the maximum beat frequency {max_beat_hz} Hz")]
    Undersampled { sample_rate_hz: f64, max_beat_hz: f64 },
}

/// Operating band `[f_lo, f_hi]` in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Band {
    pub f_lo: f64,
    pub f_hi: f64,
}

impl Band {
    pub fn new(f_lo: f64, f_hi: f64) -> Result<Self, ScheduleError> {
        let band = Self { f_lo, f_hi };
        band.validate()?;
        Ok(band)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if !(self.f_lo > 0.0 && self.f_hi > self.f_lo && self.f_hi.is_finite()) {
            return Err(ScheduleError::InvalidBand {
                f_lo: self.f_lo,
                f_hi: self.f_hi,
            });
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.f_hi - self.f_lo
    }

    /// Position of `f` within the band, 0 at `f_lo` and 1 at `f_hi`.
    pub fn normalized(&self, f: f64) -> f64 {
        (f - self.f_lo) / self.width()
    }
}

/// Passband owned by one clip-on module. Closed below, open above.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subband {
    pub module_id: usize,
    pub f_lo: f64,
    pub f_hi: f64,
}

impl Subband {
    pub fn width(&self) -> f64 {
        self.f_hi - self.f_lo
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.f_lo + self.f_hi)
    }

    pub fn contains(&self, f: f64) -> bool {
        f >= self.f_lo && f < self.f_hi
    }

    /// Whether the closed frequency span `[lo, hi]` lies inside the subband.
    pub fn contains_span(&self, lo: f64, hi: f64) -> bool {
        lo >= self.f_lo - SPAN_TOLERANCE_HZ && hi <= self.f_hi + SPAN_TOLERANCE_HZ
    }
}

/// Split `band` into `k` equal-width subbands separated by `guard_band` Hz.
///
/// Module ids are assigned in ascending frequency order.
pub fn assign_subbands(band: Band, k: usize, guard_band: f64) -> Result<Vec<Subband>, ScheduleError> {
    band.validate()?;
    if k == 0 {
        return Err(ScheduleError::NoSubbands);
    }
    if !(guard_band >= 0.0) {
        return Err(ScheduleError::InvalidParameter(format!(
            "guard band must be >= 0, got {guard_band}"
        )));
    }
    let required = (k - 1) as f64 * guard_band;
    let available = band.width();
    if required >= available {
        return Err(ScheduleError::InfeasibleSubbands {
            required_hz: required,
            available_hz: available,
        });
    }
    let width = (available - required) / k as f64;
    let subbands = (0..k)
        .map(|i| {
            let f_lo = band.f_lo + i as f64 * (width + guard_band);
            // pin the last edge to the band so the tiling is exact
            let f_hi = if i + 1 == k { band.f_hi } else { f_lo + width };
            Subband {
                module_id: i,
                f_lo,
                f_hi,
            }
        })
        .collect();
    Ok(subbands)
}

/// Per-chirp parameters shared by every frequency state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    /// Number of frequency states `M`.
    pub num_states: usize,
    pub chirp_bandwidth_hz: f64,
    pub chirp_duration_s: f64,
    pub guard_time_s: f64,
    /// Number of repeated sweeps over all states (slow time).
    pub evolutions: usize,
    /// Fast-time (beat) sample rate.
    pub sample_rate_hz: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            num_states: 64,
            chirp_bandwidth_hz: 80e6,
            chirp_duration_s: 40e-6,
            guard_time_s: 200e-9,
            evolutions: 16,
            sample_rate_hz: 2e6,
        }
    }
}

/// One chirp of the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChirpSpec {
    pub state_index: usize,
    pub evolution: usize,
    pub module_id: usize,
    pub f_center: f64,
    pub bandwidth: f64,
    pub duration: f64,
    pub sample_rate: f64,
    pub t_start: f64,
}

impl ChirpSpec {
    /// Chirp slope `B / T` in Hz/s.
    pub fn slope(&self) -> f64 {
        self.bandwidth / self.duration
    }

    pub fn t_end(&self) -> f64 {
        self.t_start + self.duration
    }

    pub fn span(&self) -> (f64, f64) {
        (
            self.f_center - 0.5 * self.bandwidth,
            self.f_center + 0.5 * self.bandwidth,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChirpSchedule {
    pub band: Band,
    pub subbands: Vec<Subband>,
    /// Evolution-major, state-minor; sorted by start time.
    pub chirps: Vec<ChirpSpec>,
    pub guard_time: f64,
    pub num_states: usize,
    pub evolutions: usize,
}

/// Builds the schedule: `M` states spread over the subbands, repeated
/// `evolutions` times with `guard_time` idle seconds after every chirp.
pub fn build_schedule(
    band: Band,
    subbands: &[Subband],
    params: &ScheduleParams,
) -> Result<ChirpSchedule, ScheduleError> {
    band.validate()?;
    validate_params(params)?;
    validate_subbands(band, subbands)?;

    let counts = allocate_states(subbands, params.num_states);
    let b = params.chirp_bandwidth_hz;
    let mut centers = Vec::with_capacity(params.num_states);
    for (sub, &n) in subbands.iter().zip(&counts) {
        let first_state = centers.len();
        if n == 0 {
            continue;
        }
        let too_wide = if n == 1 { b > sub.width() } else { b >= sub.width() };
        if too_wide {
            let f = sub.center();
            return Err(ScheduleError::ChirpExceedsSubband {
                state: first_state,
                module_id: sub.module_id,
                span_lo: f - 0.5 * b,
                span_hi: f + 0.5 * b,
                sub_lo: sub.f_lo,
                sub_hi: sub.f_hi,
            });
        }
        if n == 1 {
            centers.push((sub.center(), sub.module_id));
        } else {
            let lo = sub.f_lo + 0.5 * b;
            let step = (sub.width() - b) / (n - 1) as f64;
            centers.extend((0..n).map(|i| (lo + i as f64 * step, sub.module_id)));
        }
    }

    for (state, (f, module_id)) in centers.iter().enumerate() {
        let sub = subbands.iter().find(|s| s.module_id == *module_id).unwrap();
        let (lo, hi) = (f - 0.5 * b, f + 0.5 * b);
        if !sub.contains_span(lo, hi) {
            return Err(ScheduleError::ChirpExceedsSubband {
                state,
                module_id: *module_id,
                span_lo: lo,
                span_hi: hi,
                sub_lo: sub.f_lo,
                sub_hi: sub.f_hi,
            });
        }
    }

    let slot = params.chirp_duration_s + params.guard_time_s;
    let m = params.num_states;
    let mut chirps = Vec::with_capacity(m * params.evolutions);
    for q in 0..params.evolutions {
        for (state, &(f_center, module_id)) in centers.iter().enumerate() {
            chirps.push(ChirpSpec {
                state_index: state,
                evolution: q,
                module_id,
                f_center,
                bandwidth: b,
                duration: params.chirp_duration_s,
                sample_rate: params.sample_rate_hz,
                t_start: (q * m + state) as f64 * slot,
            });
        }
    }

    Ok(ChirpSchedule {
        band,
        subbands: subbands.to_vec(),
        chirps,
        guard_time: params.guard_time_s,
        num_states: m,
        evolutions: params.evolutions,
    })
}

fn validate_params(p: &ScheduleParams) -> Result<(), ScheduleError> {
    let bad = |msg: String| Err(ScheduleError::InvalidParameter(msg));
    if p.num_states == 0 {
        return bad("num_states must be >= 1".into());
    }
    if p.evolutions == 0 {
        return bad("evolutions must be >= 1".into());
    }
    if !(p.chirp_bandwidth_hz > 0.0) {
        return bad(format!("chirp bandwidth must be > 0, got {}", p.chirp_bandwidth_hz));
    }
    if !(p.chirp_duration_s > 0.0) {
        return bad(format!("chirp duration must be > 0, got {}", p.chirp_duration_s));
    }
    if !(p.guard_time_s >= 0.0) {
        return bad(format!("guard time must be >= 0, got {}", p.guard_time_s));
    }
    if !(p.sample_rate_hz > 0.0) {
        return bad(format!("sample rate must be > 0, got {}", p.sample_rate_hz));
    }
    if (p.chirp_duration_s * p.sample_rate_hz).round() < 2.0 {
        return bad("chirp must hold at least two fast-time samples".into());
    }
    Ok(())
}

fn validate_subbands(band: Band, subbands: &[Subband]) -> Result<(), ScheduleError> {
    if subbands.is_empty() {
        return Err(ScheduleError::NoSubbands);
    }
    for (i, s) in subbands.iter().enumerate() {
        let inside =
            s.f_hi > s.f_lo && s.f_lo >= band.f_lo - SPAN_TOLERANCE_HZ && s.f_hi <= band.f_hi + SPAN_TOLERANCE_HZ;
        let ordered = i == 0 || subbands[i - 1].f_hi <= s.f_lo;
        let unique_id = subbands[..i].iter().all(|o| o.module_id != s.module_id);
        if !(inside && ordered && unique_id) {
            return Err(ScheduleError::InvalidSubbands { index: i });
        }
    }
    Ok(())
}

/// Proportional-to-width allocation; leftover states go one each to the
/// lowest-index subbands.
pub fn allocate_states(subbands: &[Subband], m: usize) -> Vec<usize> {
    let total: f64 = subbands.iter().map(Subband::width).sum();
    let mut counts: Vec<usize> = subbands
        .iter()
        .map(|s| ((m as f64) * s.width() / total).floor() as usize)
        .collect();
    let mut assigned: usize = counts.iter().sum();
    // floor can overshoot only through rounding of near-integer ratios
    while assigned > m {
        let i = counts.iter().rposition(|&c| c > 0).unwrap();
        counts[i] -= 1;
        assigned -= 1;
    }
    let mut i = 0;
    while assigned < m {
        let k = counts.len();
        counts[i % k] += 1;
        assigned += 1;
        i += 1;
    }
    counts
}

impl ChirpSchedule {
    /// Center frequency of every state, ascending in `m`.
    pub fn state_frequencies(&self) -> Vec<f64> {
        self.chirps[..self.num_states].iter().map(|c| c.f_center).collect()
    }

    pub fn chirp(&self, state: usize, evolution: usize) -> &ChirpSpec {
        &self.chirps[evolution * self.num_states + state]
    }

    pub fn state(&self, state: usize) -> &ChirpSpec {
        &self.chirps[state]
    }

    /// Repetition interval between successive visits of one state.
    pub fn pri(&self) -> f64 {
        let c = &self.chirps[0];
        self.num_states as f64 * (c.duration + self.guard_time)
    }

    pub fn fast_time_len(&self) -> usize {
        let c = &self.chirps[0];
        (c.duration * c.sample_rate).round() as usize
    }

    pub fn sample_rate(&self) -> f64 {
        self.chirps[0].sample_rate
    }

    pub fn slope(&self) -> f64 {
        self.chirps[0].slope()
    }

    pub fn chirp_bandwidth(&self) -> f64 {
        self.chirps[0].bandwidth
    }

    /// Largest beat frequency produced by a target at `r_max` metres.
    pub fn max_beat_frequency(&self, r_max: f64) -> f64 {
        2.0 * self.slope() * r_max / SPEED_OF_LIGHT
    }

    /// Complex (I/Q) sampling must cover the maximum beat frequency.
    pub fn check_sampling(&self, r_max: f64) -> Result<(), ScheduleError> {
        let max_beat_hz = self.max_beat_frequency(r_max);
        let sample_rate_hz = self.sample_rate();
        if max_beat_hz >= sample_rate_hz {
            return Err(ScheduleError::Undersampled {
                sample_rate_hz,
                max_beat_hz,
            });
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        #[derive(Serialize)]
        struct Row {
            state_index: usize,
            evolution: usize,
            f_center_hz: f64,
            bandwidth_hz: f64,
            t_start_s: f64,
            t_chirp_s: f64,
        }
        let mut wtr = csv::Writer::from_writer(w);
        for c in &self.chirps {
            wtr.serialize(Row {
                state_index: c.state_index,
                evolution: c.evolution,
                f_center_hz: c.f_center,
                bandwidth_hz: c.bandwidth,
                t_start_s: c.t_start,
                t_chirp_s: c.duration,
            })?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// SHA-256 of the CSV export, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        hex::encode(Sha256::digest(&buf))
    }
}

/// Worst-case timing terms the guard interval must absorb.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuardBudget {
    /// Maximum round-trip delay.
    pub t_max: f64,
    pub t_ringing: f64,
    pub t_multipath: f64,
}

impl GuardBudget {
    pub fn from_max_range(r_max: f64, t_ringing: f64, t_multipath: f64) -> Self {
        Self {
            t_max: 2.0 * r_max / SPEED_OF_LIGHT,
            t_ringing,
            t_multipath,
        }
    }

    pub fn total(&self) -> f64 {
        self.t_max + self.t_ringing + self.t_multipath
    }

    pub fn is_valid(&self) -> bool {
        self.t_max >= 0.0 && self.t_ringing >= 0.0 && self.t_multipath >= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub guard_time_s: f64,
    pub required_s: f64,
    /// `T_g − (T_max + T_ringing + T_multipath)`.
    pub margin_s: f64,
}

/// The guard gap must strictly exceed the budget sum.
pub fn validate_guard_gaps(schedule: &ChirpSchedule, budget: &GuardBudget) -> ValidationReport {
    let required_s = budget.total();
    let margin_s = schedule.guard_time - required_s;
    ValidationReport {
        passed: budget.is_valid() && schedule.guard_time > required_s,
        guard_time_s: schedule.guard_time,
        required_s,
        margin_s,
    }
}
