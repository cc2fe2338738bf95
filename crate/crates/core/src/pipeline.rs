//! Batch flows over a [`Scenario`]: schedule, simulate, calibrate, image,
//! budget and the full end-to-end run.
//!
//! Every flow writes its artifacts into one output directory together with
//! `manifest.json`, which lists each file with its SHA-256. Outputs depend
//! only on the scenario and seed, so repeated runs are byte-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::budget::{budget_report, BudgetReport};
use crate::calibration::{
    calibrated_map, fit_calibration, measure_references, normalize_state, synthesize_references, CalibParams, FitReport,
};
use crate::dsp::{
    estimate_state_snr_averaged, usable_from_snr, write_profile_csv, write_snr_csv, RangeProfile, UsableSet,
};
use crate::echo::{synthesize_beat, NoiseSpec, RawDataCube};
use crate::imaging::{focus, focus_at, image_metrics, localization_error, FocusedImage, ImageMetrics};
use crate::scenario::{Resolved, Scenario, ScenarioError};
use crate::schedule::{validate_guard_gaps, ValidationReport};
use crate::{Complex64, Vec3};

/// Dynamic range of the graymap heatmaps (dB).
const HEATMAP_RANGE_DB: f64 = 40.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(#[from] ScenarioError),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("{stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl PipelineError {
    /// Process exit status: 1 config, 2 validation, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Validation(_) => 2,
            PipelineError::Stage { .. } | PipelineError::Io { .. } => 3,
        }
    }
}

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub calibrate: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seed: None,
            calibrate: true,
        }
    }
}

/// A scenario resolved and checked for timing feasibility.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scenario: Scenario,
    pub resolved: Resolved,
    pub guard: ValidationReport,
    pub calibrate: bool,
}

impl Prepared {
    pub fn new(scenario: &Scenario, opts: &RunOptions) -> Result<Self, PipelineError> {
        let mut scenario = scenario.clone();
        if let Some(seed) = opts.seed {
            scenario.seed = seed;
        }
        let resolved = scenario.resolve().map_err(PipelineError::Validation)?;
        let guard = validate_guard_gaps(&resolved.schedule, &scenario.synthesis.guard_budget());
        Ok(Self {
            calibrate: opts.calibrate && scenario.calibration.enabled,
            scenario,
            resolved,
            guard,
        })
    }

    fn require_timing(&self) -> Result<(), PipelineError> {
        if !self.guard.passed {
            return Err(guard_failure(&self.guard));
        }
        self.resolved
            .schedule
            .check_sampling(self.scenario.synthesis.r_max_m)
            .map_err(|e| PipelineError::Validation(e.to_string()))
    }

    pub fn noise(&self) -> NoiseSpec {
        self.scenario.noise_spec()
    }
}

fn guard_failure(r: &ValidationReport) -> PipelineError {
    PipelineError::Validation(format!(
        "guard time {:.3e} s is below the required {:.3e} s (margin {:.3e} s)",
        r.guard_time_s, r.required_s, r.margin_s
    ))
}

/// Per-state products of the range stage.
#[derive(Debug, Clone)]
pub struct Processed {
    /// Evolution-averaged profile of each state, index = state.
    pub profiles: Vec<RangeProfile>,
    pub snr_db: Vec<f64>,
    pub usable: UsableSet,
}

pub fn simulate(p: &Prepared) -> Result<RawDataCube, PipelineError> {
    p.require_timing()?;
    synthesize_beat(
        &p.resolved.schedule,
        &p.resolved.fabric,
        &p.resolved.truth,
        &p.scenario.targets,
        &p.noise(),
        &p.scenario.synthesis,
    )
    .map_err(stage("simulate"))
}

/// Range FFTs, per-state SNR over evolutions and the usable set.
pub fn process(p: &Prepared, cube: &RawDataCube) -> Result<Processed, PipelineError> {
    let cfg = p.scenario.processing.range_fft;
    let noiseless = p.scenario.noise.noiseless;
    let mut profiles = Vec::with_capacity(cube.num_states);
    let mut snr_db = Vec::with_capacity(cube.num_states);
    for m in 0..cube.num_states {
        let slow = cube.slow_time_profiles(m, cfg).map_err(stage("range processing"))?;
        snr_db.push(estimate_state_snr_averaged(&slow, noiseless).map_err(stage("range processing"))?);
        let mut avg = slow[0].clone();
        for q in &slow[1..] {
            for (a, b) in avg.bins.iter_mut().zip(&q.bins) {
                *a += b;
            }
        }
        profiles.push(avg.scaled(Complex64::new(1.0 / slow.len() as f64, 0.0)));
    }
    let usable = usable_from_snr(&snr_db, p.scenario.processing.usable_threshold_db);
    Ok(Processed {
        profiles,
        snr_db,
        usable,
    })
}

/// Dedicated reference pass and fit over the usable states.
pub fn calibrate(p: &Prepared, usable: &UsableSet) -> Result<FitReport, PipelineError> {
    let r = &p.resolved;
    let noise = p.scenario.calibration_noise_spec();
    let cube = synthesize_references(
        &r.schedule,
        &r.fabric,
        &r.truth,
        &r.references,
        &noise,
        &p.scenario.synthesis,
    )
    .map_err(stage("calibrate"))?;
    let opts = &p.scenario.calibration.options;
    let meas = measure_references(&cube, &r.fabric, &r.references, usable, &noise, opts).map_err(stage("calibrate"))?;
    fit_calibration(
        &meas,
        &r.fabric,
        &r.references,
        &CalibParams::nominal(r.fabric.modules.len()),
        opts,
    )
    .map_err(stage("calibrate"))
}

/// Normalized profiles and calibrated sample positions for every state.
pub fn normalized_inputs(
    p: &Prepared,
    processed: &Processed,
    theta: &CalibParams,
) -> Result<(Vec<RangeProfile>, Vec<Vec3>), PipelineError> {
    let band = p.resolved.schedule.band;
    let profiles = processed
        .profiles
        .iter()
        .map(|q| normalize_state(q, theta, &band))
        .collect();
    let positions = processed
        .profiles
        .iter()
        .map(|q| calibrated_map(theta, &p.resolved.fabric, q.timing.f_center))
        .collect::<Result<_, _>>()
        .map_err(stage("image"))?;
    Ok((profiles, positions))
}

pub fn image(
    p: &Prepared,
    processed: &Processed,
    theta: &CalibParams,
) -> Result<(FocusedImage, ImageMetrics), PipelineError> {
    let (profiles, positions) = normalized_inputs(p, processed, theta)?;
    let img = focus(&profiles, &positions, &p.scenario.grid, &processed.usable).map_err(stage("image"))?;
    let metrics = image_metrics(&img).map_err(stage("image"))?;
    Ok((img, metrics))
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub scenario: String,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
    pub files: Vec<ManifestEntry>,
}

/// Output directory that records every file it writes.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(root).map_err(|source| PipelineError::Io {
            path: root.display().to_string(),
            source,
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            entries: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.root.join(name);
        std::fs::write(&path, bytes).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.entries.retain(|e| e.path != name);
        self.entries.push(ManifestEntry {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len(),
        });
        Ok(())
    }

    /// Renders with `f` into memory, then writes.
    pub fn write_with<E: std::fmt::Display>(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> Result<(), E>,
    ) -> Result<(), PipelineError> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(|e| PipelineError::Stage {
            stage: "export",
            message: format!("{name}: {e}"),
        })?;
        self.write(name, &buf)
    }

    /// Writes `manifest.json` listing everything written so far.
    pub fn finish(mut self, p: &Prepared, command: &str) -> Result<Manifest, PipelineError> {
        self.entries.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            scenario: p.scenario.name.clone(),
            command: command.to_string(),
            config_sha256: p.scenario.content_hash(),
            seed: p.scenario.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            files: self.entries.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = self.root.join("manifest.json");
        std::fs::write(&path, json).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(manifest)
    }
}

fn write_schedule(out: &mut OutputDir, p: &Prepared) -> Result<(), PipelineError> {
    out.write_with("schedule.csv", |w| p.resolved.schedule.write_csv(w))?;
    let g = &p.guard;
    let text = format!(
        "passed = {}\nguard_time_s = {:e}\nrequired_s = {:e}\nmargin_s = {:e}\n",
        g.passed, g.guard_time_s, g.required_s, g.margin_s
    );
    out.write("validation.txt", text.as_bytes())
}

fn write_processed(
    out: &mut OutputDir,
    p: &Prepared,
    cube: &RawDataCube,
    processed: &Processed,
) -> Result<(), PipelineError> {
    out.write("cube.bin", &cube.to_f32_bytes())?;
    out.write("cube.hdr", cube.header_text().as_bytes())?;
    let freqs = p.resolved.schedule.state_frequencies();
    out.write_with("state_snr.csv", |w| {
        write_snr_csv(&freqs, &processed.snr_db, &processed.usable, w)
    })?;
    out.write_with("range_profiles.csv", |w| -> csv::Result<()> {
        for prof in &processed.profiles {
            write_profile_csv(prof, &mut *w)?;
        }
        Ok(())
    })
}

fn write_fit(out: &mut OutputDir, p: &Prepared, fit: &FitReport) -> Result<(), PipelineError> {
    out.write("fit_report.json", fit.to_json().as_bytes())?;
    let freqs = p.resolved.schedule.state_frequencies();
    out.write_with("calibrated_map.csv", |w| {
        p.resolved
            .fabric
            .write_mapping_csv(&freqs, &fit.theta_hat.module_offsets, w)
    })
}

fn write_image(out: &mut OutputDir, img: &FocusedImage, metrics: &ImageMetrics) -> Result<(), PipelineError> {
    out.write_with("image.csv", |w| img.write_csv(w))?;
    out.write("image.pgm", img.to_pgm(HEATMAP_RANGE_DB).as_bytes())?;
    out.write("metrics.txt", metrics.to_text().as_bytes())
}

fn write_budget(out: &mut OutputDir, report: &BudgetReport) -> Result<(), PipelineError> {
    out.write("budget.txt", report.to_text().as_bytes())?;
    out.write_with("budget.csv", |w| report.write_csv(w))
}

/// Writes the schedule and its guard validation; fails with a validation
/// error (after writing) when the guard gap is too small.
pub fn run_schedule(scenario: &Scenario, opts: &RunOptions, out_dir: &Path) -> Result<ValidationReport, PipelineError> {
    let p = Prepared::new(scenario, opts)?;
    let mut out = OutputDir::create(out_dir)?;
    write_schedule(&mut out, &p)?;
    out.finish(&p, "schedule")?;
    if !p.guard.passed {
        return Err(guard_failure(&p.guard));
    }
    Ok(p.guard)
}

pub fn run_simulate(scenario: &Scenario, opts: &RunOptions, out_dir: &Path) -> Result<Processed, PipelineError> {
    let p = Prepared::new(scenario, opts)?;
    let cube = simulate(&p)?;
    let processed = process(&p, &cube)?;
    let mut out = OutputDir::create(out_dir)?;
    write_schedule(&mut out, &p)?;
    write_processed(&mut out, &p, &cube, &processed)?;
    out.finish(&p, "simulate")?;
    Ok(processed)
}

pub fn run_calibrate(scenario: &Scenario, opts: &RunOptions, out_dir: &Path) -> Result<FitReport, PipelineError> {
    let p = Prepared::new(scenario, opts)?;
    let cube = simulate(&p)?;
    let processed = process(&p, &cube)?;
    let fit = calibrate(&p, &processed.usable)?;
    let mut out = OutputDir::create(out_dir)?;
    write_fit(&mut out, &p, &fit)?;
    out.finish(&p, "calibrate")?;
    Ok(fit)
}

pub fn run_budget(scenario: &Scenario, opts: &RunOptions, out_dir: &Path) -> Result<BudgetReport, PipelineError> {
    let p = Prepared::new(scenario, opts)?;
    let input = scenario
        .budget_input(&p.resolved)
        .ok_or_else(|| PipelineError::Config(ScenarioError::Integrity("scenario has no [budget] section".into())))?;
    let report = budget_report(&input).map_err(|e| PipelineError::Validation(e.to_string()))?;
    let mut out = OutputDir::create(out_dir)?;
    write_budget(&mut out, &report)?;
    out.finish(&p, "budget")?;
    Ok(report)
}

/// Simulate, optionally calibrate, focus; writes the fit and image artifacts.
pub fn run_image(scenario: &Scenario, opts: &RunOptions, out_dir: &Path) -> Result<ImageMetrics, PipelineError> {
    let p = Prepared::new(scenario, opts)?;
    let cube = simulate(&p)?;
    let processed = process(&p, &cube)?;
    let mut out = OutputDir::create(out_dir)?;
    let theta = if p.calibrate {
        let fit = calibrate(&p, &processed.usable)?;
        write_fit(&mut out, &p, &fit)?;
        fit.theta_hat
    } else {
        CalibParams::nominal(p.resolved.fabric.modules.len())
    };
    let (img, metrics) = image(&p, &processed, &theta)?;
    write_image(&mut out, &img, &metrics)?;
    out.finish(&p, "image")?;
    Ok(metrics)
}

/// Everything an end-to-end run produced.
#[derive(Debug, Clone)]
pub struct E2eResult {
    pub processed: Processed,
    pub fit: Option<FitReport>,
    pub metrics: ImageMetrics,
    /// Against the first scene target.
    pub localization_error_m: Option<f64>,
    /// `|Z|` at the first target with the run's mapping and with the
    /// nominal mapping and no normalization.
    pub peak_at_target: Option<(f64, f64)>,
    pub budget: Option<BudgetReport>,
    pub manifest: Manifest,
}

impl E2eResult {
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "usable_states = {}", self.processed.usable.len()).unwrap();
        if let Some(fit) = &self.fit {
            writeln!(s, "calibration_converged = {}", fit.converged).unwrap();
            writeln!(s, "calibration_iterations = {}", fit.iterations).unwrap();
            writeln!(s, "tau0_hat_s = {:e}", fit.theta_hat.tau0_s).unwrap();
            if let Some(d) = &fit.diagnostic {
                writeln!(s, "calibration_diagnostic = {d:?}").unwrap();
            }
        }
        s.push_str(&self.metrics.to_text());
        if let Some(e) = self.localization_error_m {
            writeln!(s, "localization_error_m = {e:.6}").unwrap();
        }
        if let Some((run, nominal)) = self.peak_at_target {
            writeln!(s, "peak_at_target = {run:.6e}").unwrap();
            writeln!(s, "peak_at_target_nominal_mapping = {nominal:.6e}").unwrap();
        }
        if let Some(b) = &self.budget {
            writeln!(s, "budget_m_eff = {}", b.m_eff).unwrap();
        }
        s
    }
}

/// Synthesize → range profiles → (calibrate) → normalize → focus → metrics.
pub fn run_e2e(scenario: &Scenario, opts: &RunOptions, out_dir: &Path) -> Result<E2eResult, PipelineError> {
    let p = Prepared::new(scenario, opts)?;
    let cube = simulate(&p)?;
    let processed = process(&p, &cube)?;
    let mut out = OutputDir::create(out_dir)?;
    write_schedule(&mut out, &p)?;
    write_processed(&mut out, &p, &cube, &processed)?;

    let k = p.resolved.fabric.modules.len();
    let fit = if p.calibrate {
        let fit = calibrate(&p, &processed.usable)?;
        write_fit(&mut out, &p, &fit)?;
        Some(fit)
    } else {
        None
    };
    let theta = fit
        .as_ref()
        .map(|f| f.theta_hat.clone())
        .unwrap_or_else(|| CalibParams::nominal(k));
    let (img, metrics) = image(&p, &processed, &theta)?;
    write_image(&mut out, &img, &metrics)?;

    let target = p.scenario.targets.first().map(|t| t.position);
    let localization_error_m = target.map(|t| localization_error(&metrics, &t));
    let peak_at_target = match target {
        Some(t) => {
            let at = |theta: &CalibParams| -> Result<f64, PipelineError> {
                let (profiles, positions) = normalized_inputs(&p, &processed, theta)?;
                Ok(focus_at(&profiles, &positions, &processed.usable, &t)
                    .map_err(stage("image"))?
                    .norm())
            };
            Some((at(&theta)?, at(&CalibParams::nominal(k))?))
        }
        None => None,
    };

    let budget = match scenario.budget_input(&p.resolved) {
        Some(input) => {
            let report = budget_report(&input).map_err(|e| PipelineError::Validation(e.to_string()))?;
            write_budget(&mut out, &report)?;
            Some(report)
        }
        None => None,
    };

    let mut result = E2eResult {
        processed,
        fit,
        metrics,
        localization_error_m,
        peak_at_target,
        budget,
        manifest: Manifest {
            scenario: String::new(),
            command: String::new(),
            config_sha256: String::new(),
            seed: 0,
            version: String::new(),
            files: vec![],
        },
    };
    out.write("summary.txt", result.summary_text().as_bytes())?;
    result.manifest = out.finish(&p, "e2e")?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Config(ScenarioError::Parse("x".into())).exit_code(), 1);
        assert_eq!(PipelineError::Validation("x".into()).exit_code(), 2);
        assert_eq!(
            PipelineError::Stage {
                stage: "image",
                message: "x".into()
            }
            .exit_code(),
            3
        );
    }

    #[test]
    fn short_guard_is_a_validation_failure_with_margin() {
        let mut s = Scenario::shipped("nominal-noiseless").unwrap();
        s.schedule.guard_time_s = 50e-9;
        let dir = tempfile::tempdir().unwrap();
        let err = run_schedule(&s, &RunOptions::default(), dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("margin"), "{err}");
        // artifacts are still written
        assert!(dir.path().join("schedule.csv").exists());
    }

    #[test]
    fn seed_override_applies() {
        let s = Scenario::shipped("budget-example").unwrap();
        let p = Prepared::new(
            &s,
            &RunOptions {
                seed: Some(99),
                calibrate: true,
            },
        )
        .unwrap();
        assert_eq!(p.noise().seed, 99);
    }

    #[test]
    fn output_dir_tracks_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path()).unwrap();
        out.write("a.txt", b"abc").unwrap();
        out.write("a.txt", b"abc").unwrap();
        assert_eq!(out.entries.len(), 1);
        assert_eq!(
            out.entries[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
