//! Clip-on aperture fabric: passband-gated module activation, the
//! frequency-to-position scan law, per-frequency loss and attachment
//! perturbations.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::schedule::Subband;
use crate::Vec3;

/// Dense sampling used to normalize the ripple shape to unit peak.
const RIPPLE_NORMALIZATION_POINTS: usize = 60_001;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FabricError {
    #[error("no active module at {f_hz} Hz (guard band or outside the fabric)")]
    NoActiveModule { f_hz: f64 },
    #[error("module {id}: {reason}")]
    InvalidModule { id: usize, reason: String },
    #[error("passbands of modules {a} and {b} overlap")]
    OverlappingPassbands { a: usize, b: usize },
    #[error("fabric must contain at least one module")]
    Empty,
    #[error("perturbation lists {got} module offsets for a fabric of {expected} modules")]
    OffsetCount { expected: usize, got: usize },
    #[error("module {id} offset {norm_m} m exceeds the model validity bound {bound_m} m")]
    OffsetTooLarge { id: usize, norm_m: f64, bound_m: f64 },
}

/// Fixed loss terms in dB plus the peak of the frequency-dependent ripple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LossComponents {
    pub coupling_db: f64,
    pub guided_wave_db: f64,
    pub insertion_db: f64,
    #[serde(default)]
    pub ripple_db_peak: f64,
}

impl LossComponents {
    /// Coupling + guided-wave + insertion.
    pub fn fixed_db(&self) -> f64 {
        self.coupling_db + self.guided_wave_db + self.insertion_db
    }

    fn validate(&self) -> Result<(), String> {
        let all = [
            self.coupling_db,
            self.guided_wave_db,
            self.insertion_db,
            self.ripple_db_peak,
        ];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(format!("loss components must be finite and >= 0, got {all:?}"));
        }
        Ok(())
    }
}

/// Monotone law mapping the fractional passband position to the fractional
/// position along the module aperture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScanLaw {
    #[default]
    Linear,
    /// `fraction^exponent`, exponent > 0.
    Power { exponent: f64 },
}

impl ScanLaw {
    fn apply(&self, fraction: f64) -> f64 {
        match *self {
            ScanLaw::Linear => fraction,
            ScanLaw::Power { exponent } => fraction.max(0.0).powf(exponent),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipOnModule {
    pub id: usize,
    /// Aperture center `c_k`.
    pub anchor: Vec3,
    /// Unit scan direction `u_k`.
    pub axis: Vec3,
    pub aperture_length: f64,
    pub passband: Subband,
    pub losses: LossComponents,
    #[serde(default)]
    pub scan_law: ScanLaw,
}

impl ClipOnModule {
    fn validate(&self) -> Result<(), FabricError> {
        let invalid = |reason: String| FabricError::InvalidModule { id: self.id, reason };
        if (self.axis.norm() - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("axis norm {} is not 1", self.axis.norm())));
        }
        if !(self.aperture_length > 0.0) {
            return Err(invalid(format!(
                "aperture length must be > 0, got {}",
                self.aperture_length
            )));
        }
        if !(self.passband.f_hi > self.passband.f_lo && self.passband.f_lo > 0.0) {
            return Err(invalid("passband must satisfy 0 < f_lo < f_hi".into()));
        }
        if self.passband.module_id != self.id {
            return Err(invalid(format!(
                "passband belongs to module {}",
                self.passband.module_id
            )));
        }
        if let ScanLaw::Power { exponent } = self.scan_law {
            if !(exponent > 0.0) {
                return Err(invalid("scan-law exponent must be > 0".into()));
            }
        }
        self.losses.validate().map_err(invalid)
    }

    /// Position for frequency `f` with the anchor displaced by `offset`.
    fn position(&self, f: f64, offset: &Vec3) -> Vec3 {
        let pb = &self.passband;
        let fraction = self.scan_law.apply((f - pb.f_lo) / (pb.f_hi - pb.f_lo));
        self.anchor + offset + self.axis * (self.aperture_length * (fraction - 0.5))
    }
}

/// One sinusoidal ripple term: `amplitude · sin(2π f / period + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RippleComponent {
    pub amplitude: f64,
    pub period_hz: f64,
    pub phase_rad: f64,
}

/// Fabric-wide ripple shape, scaled per module by `ripple_db_peak`.
///
/// The raw sum of sinusoids is normalized so that its largest magnitude
/// over the fabric's frequency extent is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RippleProfile {
    pub components: Vec<RippleComponent>,
}

impl RippleProfile {
    /// Two-term profile with phases drawn from `seed`.
    pub fn seeded(seed: u64, terms: [(f64, f64); 2]) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let components = terms
            .iter()
            .map(|&(amplitude, period_hz)| RippleComponent {
                amplitude,
                period_hz,
                phase_rad: rng.random_range(0.0..std::f64::consts::TAU),
            })
            .collect();
        Self { components }
    }

    fn raw(&self, f: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.amplitude * (std::f64::consts::TAU * f / c.period_hz + c.phase_rad).sin())
            .sum()
    }

    fn peak_over(&self, f_lo: f64, f_hi: f64) -> f64 {
        let n = RIPPLE_NORMALIZATION_POINTS;
        (0..n)
            .map(|i| self.raw(f_lo + (f_hi - f_lo) * i as f64 / (n - 1) as f64).abs())
            .fold(0.0, f64::max)
    }
}

/// Attachment-induced distortions of the ideal fabric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationState {
    /// Global delay `τ0` in seconds.
    #[serde(default)]
    pub delay_offset_s: f64,
    /// Linear gain tilt: `gain_tilt_db · (ν − ½)` over the normalized band.
    #[serde(default)]
    pub gain_tilt_db: f64,
    /// Rigid anchor displacement per module, indexed like `FabricConfig::modules`.
    #[serde(default)]
    pub module_offsets: Vec<Vec3>,
    #[serde(default = "default_offset_bound")]
    pub max_offset_m: f64,
}

fn default_offset_bound() -> f64 {
    0.01
}

impl PerturbationState {
    pub fn none(num_modules: usize) -> Self {
        Self {
            delay_offset_s: 0.0,
            gain_tilt_db: 0.0,
            module_offsets: vec![Vec3::zeros(); num_modules],
            max_offset_m: default_offset_bound(),
        }
    }

    /// Gain in dB at normalized band position `nu`.
    pub fn gain_db(&self, nu: f64) -> f64 {
        self.gain_tilt_db * (nu - 0.5)
    }

    pub fn validate(&self, fabric: &FabricConfig) -> Result<(), FabricError> {
        if self.module_offsets.len() != fabric.modules.len() {
            return Err(FabricError::OffsetCount {
                expected: fabric.modules.len(),
                got: self.module_offsets.len(),
            });
        }
        for (m, d) in fabric.modules.iter().zip(&self.module_offsets) {
            if d.norm() > self.max_offset_m {
                return Err(FabricError::OffsetTooLarge {
                    id: m.id,
                    norm_m: d.norm(),
                    bound_m: self.max_offset_m,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FabricConfig {
    pub modules: Vec<ClipOnModule>,
    pub trunk_feed_origin: Vec3,
    pub ripple: RippleProfile,
    /// 1 / max|raw ripple| over the fabric extent; 0 when there is no ripple.
    #[serde(skip)]
    ripple_scale: f64,
}

impl FabricConfig {
    pub fn new(
        modules: Vec<ClipOnModule>,
        trunk_feed_origin: Vec3,
        ripple: RippleProfile,
    ) -> Result<Self, FabricError> {
        if modules.is_empty() {
            return Err(FabricError::Empty);
        }
        for (i, m) in modules.iter().enumerate() {
            m.validate()?;
            for o in &modules[..i] {
                if o.id == m.id {
                    return Err(FabricError::InvalidModule {
                        id: m.id,
                        reason: "duplicate module id".into(),
                    });
                }
                let disjoint = o.passband.f_hi <= m.passband.f_lo || m.passband.f_hi <= o.passband.f_lo;
                if !disjoint {
                    return Err(FabricError::OverlappingPassbands { a: o.id, b: m.id });
                }
            }
        }
        let mut fabric = Self {
            modules,
            trunk_feed_origin,
            ripple,
            ripple_scale: 0.0,
        };
        if !fabric.ripple.components.is_empty() {
            let (lo, hi) = fabric.extent();
            let peak = fabric.ripple.peak_over(lo, hi);
            if peak > 0.0 {
                fabric.ripple_scale = 1.0 / peak;
            }
        }
        Ok(fabric)
    }

    /// Lowest passband edge and highest passband edge.
    pub fn extent(&self) -> (f64, f64) {
        let lo = self
            .modules
            .iter()
            .map(|m| m.passband.f_lo)
            .fold(f64::INFINITY, f64::min);
        let hi = self
            .modules
            .iter()
            .map(|m| m.passband.f_hi)
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    pub fn subbands(&self) -> Vec<Subband> {
        let mut subs: Vec<_> = self.modules.iter().map(|m| m.passband).collect();
        subs.sort_by(|a, b| a.f_lo.total_cmp(&b.f_lo));
        subs
    }

    /// Index into `modules` of the module whose passband contains `f`.
    pub fn active_index(&self, f: f64) -> Option<usize> {
        self.modules.iter().position(|m| m.passband.contains(f))
    }

    /// Id of the module active at `f`, or `None` in a guard band.
    pub fn active_module(&self, f: f64) -> Option<usize> {
        self.active_index(f).map(|i| self.modules[i].id)
    }

    fn active(&self, f: f64) -> Result<(usize, &ClipOnModule), FabricError> {
        self.active_index(f)
            .map(|i| (i, &self.modules[i]))
            .ok_or(FabricError::NoActiveModule { f_hz: f })
    }

    /// Ideal virtual sample position `x(f)`.
    pub fn nominal_map(&self, f: f64) -> Result<Vec3, FabricError> {
        let (_, m) = self.active(f)?;
        Ok(m.position(f, &Vec3::zeros()))
    }

    /// Position with each module anchor displaced by `offsets[k]`.
    pub fn map_with_offsets(&self, offsets: &[Vec3], f: f64) -> Result<Vec3, FabricError> {
        let (i, m) = self.active(f)?;
        let offset = offsets.get(i).copied().unwrap_or_else(Vec3::zeros);
        Ok(m.position(f, &offset))
    }

    pub fn perturbed_map(&self, perturbation: &PerturbationState, f: f64) -> Result<Vec3, FabricError> {
        self.map_with_offsets(&perturbation.module_offsets, f)
    }

    /// Normalized ripple shape in `[-1, 1]` at `f`.
    pub fn ripple_shape(&self, f: f64) -> f64 {
        // clamp absorbs peaks that fall between normalization samples
        (self.ripple.raw(f) * self.ripple_scale).clamp(-1.0, 1.0)
    }

    /// Total loss in dB at `f`: fixed terms plus the scaled ripple.
    pub fn loss_at(&self, f: f64) -> Result<f64, FabricError> {
        let (_, m) = self.active(f)?;
        Ok(m.losses.fixed_db() + m.losses.ripple_db_peak * self.ripple_shape(f))
    }

    pub fn centroid(&self) -> Vec3 {
        let sum = self.modules.iter().fold(Vec3::zeros(), |acc, m| acc + m.anchor);
        sum / self.modules.len() as f64
    }

    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("fabric serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// CSV of `(f_hz, module_id, x, y, z)` for each frequency.
    pub fn write_mapping_csv<W: std::io::Write>(
        &self,
        freqs: &[f64],
        offsets: &[Vec3],
        w: W,
    ) -> Result<(), Box<dyn std::error::Error>> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["f_hz", "module_id", "x_m", "y_m", "z_m"])?;
        for &f in freqs {
            let x = self.map_with_offsets(offsets, f)?;
            let id = self.active_module(f).unwrap();
            wtr.serialize((f, id, x.x, x.y, x.z))?;
        }
        wtr.flush()?;
        Ok(())
    }
}
