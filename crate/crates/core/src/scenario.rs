//! Scenario files: one TOML document describing a complete run.
//!
//! Unknown keys are rejected at every level. The document carries a
//! `schema_version`; this build reads version 1.
//!
//! ```toml
//! schema_version = 1
//! name = "example"
//! seed = 7
//!
//! [band]
//! f_lo = 60e9
//! f_hi = 66e9
//!
//! [subbands]
//! count = 2
//! guard_band_hz = 100e6
//!
//! [schedule]            # optional; defaults shown in ScheduleParams
//! num_states = 64
//!
//! [[fabric.modules]]    # one per subband, in frequency order
//! anchor = [-0.1, 0.0, 0.0]
//! axis = [1.0, 0.0, 0.0]
//! aperture_length = 0.04
//! losses = { coupling_db = 4.0, guided_wave_db = 1.0, insertion_db = 2.0 }
//!
//! [[targets]]
//! position = [0.05, 0.8, 0.0]
//! rcs = 1.0
//!
//! [noise]
//! reference_snr_db = 20.0
//! reference_range_m = 3.0
//! ```
//!
//! Remaining sections (`truth`, `references`, `synthesis`, `processing`,
//! `calibration`, `grid`, `budget`) are optional.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::budget::BudgetInput;
use crate::calibration::{default_references, validate_references, CalibOptions, ReferenceScatterer};
use crate::dsp::RangeFftConfig;
use crate::echo::{NoiseSpec, SynthesisConfig, Target};
use crate::fabric::{ClipOnModule, FabricConfig, LossComponents, PerturbationState, RippleProfile, ScanLaw};
use crate::imaging::ImagingGrid;
use crate::schedule::{assign_subbands, build_schedule, Band, ChirpSchedule, ScheduleParams, Subband};
use crate::Vec3;

pub const SCHEMA_VERSION: u32 = 1;

/// Minimum separation between a reference scatterer and a scene target.
const MIN_REFERENCE_TARGET_SEPARATION_M: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("unsupported schema_version {found}; this build reads {SCHEMA_VERSION}")]
    SchemaVersion { found: u32 },
    #[error("{0}")]
    Integrity(String),
    #[error("no shipped scenario named {0:?}")]
    UnknownShipped(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubbandSpec {
    pub count: usize,
    #[serde(default)]
    pub guard_band_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSpec {
    pub anchor: Vec3,
    pub axis: Vec3,
    pub aperture_length: f64,
    #[serde(default)]
    pub losses: LossComponents,
    #[serde(default)]
    pub scan_law: ScanLaw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FabricSpec {
    pub modules: Vec<ModuleSpec>,
    #[serde(default = "Vec3::zeros")]
    pub trunk_feed_origin: Vec3,
    #[serde(default)]
    pub ripple: RippleProfile,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub reference_snr_db: f64,
    pub reference_range_m: f64,
    #[serde(default)]
    pub noiseless: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProcessingSection {
    pub range_fft: RangeFftConfig,
    /// States must exceed this SNR to enter the usable set.
    pub usable_threshold_db: f64,
}

impl Default for ProcessingSection {
    fn default() -> Self {
        Self {
            range_fft: RangeFftConfig::default(),
            usable_threshold_db: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub enabled: bool,
    /// `[calibration.options]`.
    pub options: CalibOptions,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            enabled: true,
            options: CalibOptions::default(),
        }
    }
}

/// Link-budget inputs. Per-state ripple comes from the fabric's ripple shape
/// at each scheduled state, scaled to `state_ripple_peak_db`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    pub losses: LossComponents,
    pub baseline_snr_db: f64,
    pub reference_range_m: f64,
    pub baseline_max_range_m: f64,
    pub threshold_db: f64,
    pub state_ripple_peak_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub band: Band,
    pub subbands: SubbandSpec,
    #[serde(default)]
    pub schedule: ScheduleParams,
    pub fabric: FabricSpec,
    /// Attachment perturbation applied when synthesizing; defaults to none.
    #[serde(default)]
    pub truth: Option<PerturbationState>,
    #[serde(default)]
    pub targets: Vec<Target>,
    /// Defaults to the standard host-enclosure layout.
    #[serde(default)]
    pub references: Option<Vec<ReferenceScatterer>>,
    pub noise: NoiseSection,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub processing: ProcessingSection,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub grid: ImagingGrid,
    #[serde(default)]
    pub budget: Option<BudgetSection>,
}

/// Scenario files bundled with the crate, by name.
pub const SHIPPED: [(&str, &str); 3] = [
    ("budget-example", include_str!("../scenarios/budget-example.toml")),
    ("nominal-noiseless", include_str!("../scenarios/nominal-noiseless.toml")),
    (
        "perturbed-vs-nominal",
        include_str!("../scenarios/perturbed-vs-nominal.toml"),
    ),
];

/// Everything a run needs, derived from a validated scenario.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub subbands: Vec<Subband>,
    pub schedule: ChirpSchedule,
    pub fabric: FabricConfig,
    pub truth: PerturbationState,
    pub references: Vec<ReferenceScatterer>,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        // peek at the version first so old files fail with a clear message
        #[derive(Deserialize)]
        struct Version {
            schema_version: Option<u32>,
        }
        if let Ok(Version {
            schema_version: Some(v),
        }) = toml::from_str::<Version>(text)
        {
            if v != SCHEMA_VERSION {
                return Err(ScenarioError::SchemaVersion { found: v });
            }
        }
        let scenario: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        scenario.check_integrity()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn shipped(name: &str) -> Result<Self, ScenarioError> {
        let (_, text) = SHIPPED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ScenarioError::UnknownShipped(name.to_string()))?;
        Self::from_toml_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    fn check_integrity(&self) -> Result<(), ScenarioError> {
        let bad = |s: String| Err(ScenarioError::Integrity(s));
        if self.fabric.modules.len() != self.subbands.count {
            return bad(format!(
                "{} subbands but {} fabric modules; each subband needs exactly one module",
                self.subbands.count,
                self.fabric.modules.len()
            ));
        }
        if let Some(truth) = &self.truth {
            if truth.module_offsets.len() != self.fabric.modules.len() {
                return bad(format!(
                    "truth.module_offsets lists {} entries for {} modules",
                    truth.module_offsets.len(),
                    self.fabric.modules.len()
                ));
            }
        }
        if let Some(refs) = &self.references {
            for r in refs {
                for (i, t) in self.targets.iter().enumerate() {
                    if (r.position - t.position).norm() < MIN_REFERENCE_TARGET_SEPARATION_M {
                        return bad(format!("reference {} coincides with target {i}", r.id));
                    }
                }
            }
        }
        Ok(())
    }

    /// Builds subbands, schedule and fabric. Failures here are validation
    /// failures of an otherwise well-formed scenario.
    pub fn resolve(&self) -> Result<Resolved, String> {
        let subbands =
            assign_subbands(self.band, self.subbands.count, self.subbands.guard_band_hz).map_err(|e| e.to_string())?;
        let schedule = build_schedule(self.band, &subbands, &self.schedule).map_err(|e| e.to_string())?;
        let modules = self
            .fabric
            .modules
            .iter()
            .zip(&subbands)
            .map(|(m, sub)| ClipOnModule {
                id: sub.module_id,
                anchor: m.anchor,
                axis: m.axis,
                aperture_length: m.aperture_length,
                passband: *sub,
                losses: m.losses,
                scan_law: m.scan_law,
            })
            .collect();
        let fabric = FabricConfig::new(modules, self.fabric.trunk_feed_origin, self.fabric.ripple.clone())
            .map_err(|e| e.to_string())?;
        let truth = self
            .truth
            .clone()
            .unwrap_or_else(|| PerturbationState::none(fabric.modules.len()));
        truth.validate(&fabric).map_err(|e| e.to_string())?;
        let references = self.references.clone().unwrap_or_else(|| default_references(&fabric));
        if self.calibration.enabled {
            validate_references(&references, &fabric).map_err(|e| e.to_string())?;
        }
        Ok(Resolved {
            subbands,
            schedule,
            fabric,
            truth,
            references,
        })
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            reference_snr_db: self.noise.reference_snr_db,
            reference_range_m: self.noise.reference_range_m,
            seed: self.seed,
            noiseless: self.noise.noiseless,
        }
    }

    /// Noise for the reference pass: an independent stream derived from the seed.
    pub fn calibration_noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            seed: self.seed ^ 0x9E37_79B9_7F4A_7C15,
            ..self.noise_spec()
        }
    }

    /// Budget input for this scenario's schedule and fabric ripple.
    pub fn budget_input(&self, resolved: &Resolved) -> Option<BudgetInput> {
        let b = self.budget?;
        let ripple = resolved
            .schedule
            .state_frequencies()
            .iter()
            .map(|&f| b.state_ripple_peak_db * resolved.fabric.ripple_shape(f))
            .collect();
        Some(BudgetInput {
            losses: b.losses,
            baseline_snr_db: b.baseline_snr_db,
            reference_range_m: b.reference_range_m,
            baseline_max_range_m: b.baseline_max_range_m,
            num_states: resolved.schedule.num_states,
            threshold_db: b.threshold_db,
            per_state_ripple_db: ripple,
        })
    }
}
