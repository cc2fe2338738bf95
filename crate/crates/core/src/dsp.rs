//! Per-state processing of dechirped beat signals.
//!
//! Fast-time samples are taken with their time origin at the chirp center
//! (the instant the sweep passes `f_c`). The range FFT is phase-referenced
//! to that same origin, so for a symmetric window the response of a point
//! target is its echo phase times a real, positive main lobe.

use std::cell::RefCell;
use std::f64::consts::{LN_2, PI, TAU};
use std::sync::Arc;

use rustfft::{Fft, FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Complex64, SPEED_OF_LIGHT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("SNR undefined: noise floor is zero")]
    ZeroNoiseFloor,
    #[error("insufficient slow time: need at least 2 evolutions, got {0}")]
    InsufficientSlowTime(usize),
    #[error("fast-time record must hold at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("zero-padding factor must be >= 1")]
    BadZeroPad,
}

/// Taper applied before a transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Rectangular,
    #[default]
    Hann,
}

impl Window {
    /// Symmetric window coefficients of length `n`.
    pub fn coefficients(&self, n: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; n],
            Window::Hann if n < 2 => vec![1.0; n],
            Window::Hann => (0..n)
                .map(|i| 0.5 * (1.0 - (TAU * i as f64 / (n - 1) as f64).cos()))
                .collect(),
        }
    }

    /// `Σ w[n]` and `Σ w[n]²`.
    pub fn sums(&self, n: usize) -> (f64, f64) {
        let w = self.coefficients(n);
        (w.iter().sum(), w.iter().map(|v| v * v).sum())
    }
}

/// Range-FFT settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RangeFftConfig {
    pub window: Window,
    pub zero_pad: usize,
}

impl Default for RangeFftConfig {
    fn default() -> Self {
        Self {
            window: Window::Hann,
            zero_pad: 4,
        }
    }
}

/// Sampling geometry of one chirp, enough to map bins to range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChirpTiming {
    pub f_center: f64,
    pub slope: f64,
    pub sample_rate: f64,
}

impl ChirpTiming {
    pub fn beat_frequency(&self, range: f64) -> f64 {
        2.0 * self.slope * range / SPEED_OF_LIGHT
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeProfile {
    pub state: usize,
    pub timing: ChirpTiming,
    pub config: RangeFftConfig,
    /// Fast-time samples before padding.
    pub n_samples: usize,
    pub bins: Vec<Complex64>,
    /// Range of each bin in metres, `c·f_b / (2S)`.
    pub range_axis: Vec<f64>,
    /// Median-based estimate of the mean noise power per bin.
    pub noise_floor: f64,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(len, direction))
}

/// `median(x) / ln 2`: unbiased mean of exponentially distributed powers.
pub fn median_noise_floor(powers: &[f64]) -> f64 {
    if powers.is_empty() {
        return 0.0;
    }
    let mut v = powers.to_vec();
    let n = v.len();
    let mid = n / 2;
    let (_, upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    let median = if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    median / LN_2
}

/// Windowed, zero-padded range FFT of one chirp's fast-time samples.
///
/// Bins are scaled by `1/√N` so that `Σ|Y|² / zero_pad` equals the windowed
/// time-domain energy.
pub fn range_profile(
    samples: &[Complex64],
    state: usize,
    timing: ChirpTiming,
    config: RangeFftConfig,
) -> Result<RangeProfile, DspError> {
    let n = samples.len();
    if n < 2 {
        return Err(DspError::TooShort(n));
    }
    if config.zero_pad == 0 {
        return Err(DspError::BadZeroPad);
    }
    let nfft = n * config.zero_pad;
    let w = config.window.coefficients(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    for ((b, s), wi) in buf.iter_mut().zip(samples).zip(&w) {
        *b = s * *wi;
    }
    plan(nfft, FftDirection::Forward).process(&mut buf);

    // move the phase reference from sample 0 to the record center
    let center = 0.5 * (n - 1) as f64;
    let scale = 1.0 / (n as f64).sqrt();
    for (k, b) in buf.iter_mut().enumerate() {
        let phase = TAU * (k as f64) * center / nfft as f64;
        *b *= Complex64::from_polar(scale, phase);
    }

    let bin_hz = timing.sample_rate / nfft as f64;
    let range_axis = (0..nfft)
        .map(|k| SPEED_OF_LIGHT * (k as f64 * bin_hz) / (2.0 * timing.slope))
        .collect();
    let powers: Vec<f64> = buf.iter().map(|b| b.norm_sqr()).collect();
    Ok(RangeProfile {
        state,
        timing,
        config,
        n_samples: n,
        noise_floor: median_noise_floor(&powers),
        bins: buf,
        range_axis,
    })
}

impl RangeProfile {
    /// Range spacing between adjacent (padded) bins.
    pub fn bin_spacing(&self) -> f64 {
        self.range_axis[1] - self.range_axis[0]
    }

    /// Bin whose range is closest to `r` (clamped to the axis).
    pub fn nearest_bin(&self, r: f64) -> usize {
        let k = (r / self.bin_spacing()).round();
        (k.max(0.0) as usize).min(self.bins.len() - 1)
    }

    /// Complex linear interpolation on the range axis; zero outside it.
    pub fn interpolate(&self, r: f64) -> Complex64 {
        let pos = r / self.bin_spacing();
        if !(pos >= 0.0) || pos > (self.bins.len() - 1) as f64 {
            return Complex64::new(0.0, 0.0);
        }
        let k = pos.floor() as usize;
        if k + 1 >= self.bins.len() {
            return self.bins[k];
        }
        let t = pos - k as f64;
        self.bins[k] * (1.0 - t) + self.bins[k + 1] * t
    }

    /// Global argmax of `|Y|²`; ties resolve to the lower bin.
    pub fn peak(&self) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, b) in self.bins.iter().enumerate() {
            let p = b.norm_sqr();
            if p > best.1 {
                best = (k, p);
            }
        }
        best
    }

    /// Normalized amplitude response of this profile's bin `k` to a point
    /// target at range `r`. One when the target sits exactly on the bin.
    pub fn response(&self, k: usize, r: f64) -> f64 {
        let nfft = self.bins.len() as f64;
        let delta = self.timing.beat_frequency(r) / self.timing.sample_rate - k as f64 / nfft;
        window_response(self.config.window, self.n_samples, delta)
    }

    /// Multiplies every bin by `factor`.
    pub fn scaled(&self, factor: Complex64) -> RangeProfile {
        let mut out = self.clone();
        for b in &mut out.bins {
            *b *= factor;
        }
        out.noise_floor *= factor.norm_sqr();
        out
    }
}

/// `Σ cos(2π x (n − (N−1)/2))` over `n = 0..N`, in closed form.
fn dirichlet(n: usize, x: f64) -> f64 {
    let nf = n as f64;
    let s = (PI * x).sin();
    if s.abs() < 1e-9 {
        nf * (PI * nf * x).cos() / (PI * x).cos()
    } else {
        (PI * nf * x).sin() / s
    }
}

/// `Σ w[n] cos(2π δ (n − (N−1)/2)) / Σ w[n]`: real response of a centered,
/// symmetric window to a tone offset by `delta` cycles/sample.
pub fn window_response(window: Window, n: usize, delta: f64) -> f64 {
    match window {
        Window::Hann if n >= 2 => {
            let a = 1.0 / (n - 1) as f64;
            let acc = 0.5 * dirichlet(n, delta) + 0.25 * (dirichlet(n, delta + a) + dirichlet(n, delta - a));
            acc / (0.5 * (n - 1) as f64)
        }
        _ => dirichlet(n, delta) / n as f64,
    }
}

/// Peak-to-floor ratio in dB.
///
/// A zero floor is an error unless `noiseless` is set, in which case the
/// SNR is reported as `+∞`.
pub fn estimate_state_snr(profile: &RangeProfile, noiseless: bool) -> Result<f64, DspError> {
    let (_, peak) = profile.peak();
    if profile.noise_floor <= 0.0 {
        return if noiseless {
            Ok(f64::INFINITY)
        } else {
            Err(DspError::ZeroNoiseFloor)
        };
    }
    Ok(10.0 * (peak / profile.noise_floor).log10())
}

/// SNR of one state from several evolutions of the same scene.
///
/// Peak of the evolution-averaged power spectrum over the mean of the
/// per-evolution noise floors. Averaging power (not complex bins) keeps the
/// single-chirp SNR scale while shrinking the estimate's spread.
pub fn estimate_state_snr_averaged(profiles: &[RangeProfile], noiseless: bool) -> Result<f64, DspError> {
    let Some(first) = profiles.first() else {
        return Err(DspError::InsufficientSlowTime(0));
    };
    let q = profiles.len() as f64;
    let mut power = vec![0.0; first.bins.len()];
    for p in profiles {
        for (acc, b) in power.iter_mut().zip(&p.bins) {
            *acc += b.norm_sqr() / q;
        }
    }
    let peak = power.iter().copied().fold(0.0, f64::max);
    let floor = profiles.iter().map(|p| p.noise_floor).sum::<f64>() / q;
    if floor <= 0.0 {
        return if noiseless {
            Ok(f64::INFINITY)
        } else {
            Err(DspError::ZeroNoiseFloor)
        };
    }
    Ok(10.0 * (peak / floor).log10())
}

/// States whose SNR strictly exceeds the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsableSet {
    pub members: Vec<usize>,
    pub threshold_db: f64,
}

impl UsableSet {
    pub fn all(m: usize) -> Self {
        Self {
            members: (0..m).collect(),
            threshold_db: f64::NEG_INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, m: usize) -> bool {
        self.members.binary_search(&m).is_ok()
    }
}

pub fn usable_from_snr(snr_db: &[f64], threshold_db: f64) -> UsableSet {
    UsableSet {
        members: snr_db
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > threshold_db)
            .map(|(m, _)| m)
            .collect(),
        threshold_db,
    }
}

/// Estimates each profile's SNR and keeps those strictly above threshold.
/// `profiles[i]` must belong to state `i`.
pub fn usable_states(profiles: &[RangeProfile], threshold_db: f64) -> Result<(UsableSet, Vec<f64>), DspError> {
    let snr = profiles
        .iter()
        .map(|p| estimate_state_snr(p, false))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((usable_from_snr(&snr, threshold_db), snr))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DopplerProfile {
    pub state: usize,
    pub f_center: f64,
    /// `bins[range_bin][doppler_bin]`, Doppler bins fft-shifted.
    pub bins: Vec<Vec<Complex64>>,
    pub range_axis: Vec<f64>,
    /// Radial velocity per Doppler bin; positive means receding.
    pub velocity_axis: Vec<f64>,
}

impl DopplerProfile {
    /// `(range_bin, doppler_bin)` of the strongest cell.
    pub fn peak(&self) -> (usize, usize) {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for (r, row) in self.bins.iter().enumerate() {
            for (d, v) in row.iter().enumerate() {
                if v.norm_sqr() > best.2 {
                    best = (r, d, v.norm_sqr());
                }
            }
        }
        (best.0, best.1)
    }

    pub fn velocity_resolution(&self) -> f64 {
        self.velocity_axis[1] - self.velocity_axis[0]
    }
}

/// Slow-time spectrum of one state from its per-evolution range profiles.
///
/// A receding target's echo phase falls by `2π f_D T_pri` per evolution
/// with `f_D = 2 v f_c / c`; bins are arranged so that such a target lands
/// at `+v`.
pub fn doppler_spectrum(profiles: &[RangeProfile], pri: f64, window: Window) -> Result<DopplerProfile, DspError> {
    let q = profiles.len();
    if q < 2 {
        return Err(DspError::InsufficientSlowTime(q));
    }
    let first = &profiles[0];
    let nbins = first.bins.len();
    let w = window.coefficients(q);
    let fft = plan(q, FftDirection::Inverse);
    let scale = 1.0 / (q as f64).sqrt();
    let mut bins = Vec::with_capacity(nbins);
    let mut buf = vec![Complex64::new(0.0, 0.0); q];
    for k in 0..nbins {
        for (e, p) in profiles.iter().enumerate() {
            buf[e] = p.bins[k] * w[e] * scale;
        }
        fft.process(&mut buf);
        let mut row = vec![Complex64::new(0.0, 0.0); q];
        for (i, v) in buf.iter().enumerate() {
            row[(i + q / 2) % q] = *v;
        }
        bins.push(row);
    }
    let velocity_axis = (0..q)
        .map(|i| {
            let f_d = (i as f64 - (q / 2) as f64) / (q as f64 * pri);
            f_d * SPEED_OF_LIGHT / (2.0 * first.timing.f_center)
        })
        .collect();
    Ok(DopplerProfile {
        state: first.state,
        f_center: first.timing.f_center,
        bins,
        range_axis: first.range_axis.clone(),
        velocity_axis,
    })
}

/// CSV of `(range_m, real, imag, magnitude_db)`.
pub fn write_profile_csv<W: std::io::Write>(profile: &RangeProfile, w: W) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["range_m", "real", "imag", "magnitude_db"])?;
    for (r, b) in profile.range_axis.iter().zip(&profile.bins) {
        wtr.serialize((r, b.re, b.im, 10.0 * b.norm_sqr().log10()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// CSV of `(state, f_center_hz, snr_db, usable)`.
pub fn write_snr_csv<W: std::io::Write>(freqs: &[f64], snr_db: &[f64], usable: &UsableSet, w: W) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["state", "f_center_hz", "snr_db", "usable"])?;
    for (m, (f, s)) in freqs.iter().zip(snr_db).enumerate() {
        wtr.serialize((m, f, s, usable.contains(m)))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Tone `amp · e^{j(phase + 2π f t_n)}` sampled at the centered fast-time grid.
pub fn centered_tone(n: usize, sample_rate: f64, freq: f64, amp: f64, phase: f64) -> Vec<Complex64> {
    let center = 0.5 * (n - 1) as f64;
    (0..n)
        .map(|i| {
            let t = (i as f64 - center) / sample_rate;
            Complex64::from_polar(amp, phase + 2.0 * PI * freq * t)
        })
        .collect()
}
