//! Relative link budget for a clip-on fabric: additive dB losses, the
//! monostatic `R⁻⁴` range penalty and the effective aperture left after
//! ripple pushes states under the processing threshold.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::usable_from_snr;
use crate::fabric::LossComponents;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BudgetError {
    #[error("loss components must be finite and >= 0")]
    NegativeLoss,
    #[error("{name} must be > 0, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("per-state ripple lists {got} states, expected M = {expected}")]
    StateCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetInput {
    pub losses: LossComponents,
    /// SNR without the fabric at `reference_range_m`.
    pub baseline_snr_db: f64,
    pub reference_range_m: f64,
    pub baseline_max_range_m: f64,
    pub num_states: usize,
    pub threshold_db: f64,
    /// Ripple loss of each state (dB), length `num_states`.
    pub per_state_ripple_db: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub total_loss_db: f64,
    pub snr_at_reference_db: f64,
    pub range_reduction_factor: f64,
    pub reduced_max_range_m: f64,
    pub m_eff: usize,
    pub below_threshold: Vec<usize>,
    pub per_state_snr_db: Vec<f64>,
    pub threshold_db: f64,
    pub baseline_snr_db: f64,
    pub baseline_max_range_m: f64,
    pub reference_range_m: f64,
}

/// Sum of the four loss terms in dB.
pub fn total_clip_on_loss(c: &LossComponents) -> f64 {
    c.coupling_db + c.guided_wave_db + c.insertion_db + c.ripple_db_peak
}

/// `10^(loss/40)`: range shrink factor under the `R⁻⁴` law.
pub fn range_reduction_factor(loss_db: f64) -> f64 {
    10f64.powf(loss_db / 40.0)
}

pub fn reduced_max_range(baseline_max_m: f64, loss_db: f64) -> f64 {
    baseline_max_m / range_reduction_factor(loss_db)
}

/// Number of states strictly above `threshold_db` and the indices of the rest.
pub fn effective_aperture(per_state_snr_db: &[f64], threshold_db: f64) -> (usize, Vec<usize>) {
    let usable = usable_from_snr(per_state_snr_db, threshold_db);
    let below = (0..per_state_snr_db.len()).filter(|m| !usable.contains(*m)).collect();
    (usable.len(), below)
}

pub fn budget_report(input: &BudgetInput) -> Result<BudgetReport, BudgetError> {
    let l = &input.losses;
    let parts = [l.coupling_db, l.guided_wave_db, l.insertion_db, l.ripple_db_peak];
    if parts.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(BudgetError::NegativeLoss);
    }
    for (name, value) in [
        ("reference_range_m", input.reference_range_m),
        ("baseline_max_range_m", input.baseline_max_range_m),
    ] {
        if !(value > 0.0) {
            return Err(BudgetError::NonPositive { name, value });
        }
    }
    if input.per_state_ripple_db.len() != input.num_states {
        return Err(BudgetError::StateCount {
            expected: input.num_states,
            got: input.per_state_ripple_db.len(),
        });
    }
    let total = total_clip_on_loss(l);
    let fixed_snr = input.baseline_snr_db - l.fixed_db();
    let per_state: Vec<f64> = input.per_state_ripple_db.iter().map(|r| fixed_snr - r).collect();
    let (m_eff, below) = effective_aperture(&per_state, input.threshold_db);
    Ok(BudgetReport {
        total_loss_db: total,
        snr_at_reference_db: input.baseline_snr_db - total,
        range_reduction_factor: range_reduction_factor(total),
        reduced_max_range_m: reduced_max_range(input.baseline_max_range_m, total),
        m_eff,
        below_threshold: below,
        per_state_snr_db: per_state,
        threshold_db: input.threshold_db,
        baseline_snr_db: input.baseline_snr_db,
        baseline_max_range_m: input.baseline_max_range_m,
        reference_range_m: input.reference_range_m,
    })
}

impl BudgetReport {
    /// Human-readable summary table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = self.per_state_snr_db.len();
        writeln!(s, "quantity                          value").unwrap();
        writeln!(s, "total clip-on loss (dB)           {:.3}", self.total_loss_db).unwrap();
        writeln!(
            s,
            "SNR at {:.1} m (dB)                {:.3}  (baseline {:.3})",
            self.reference_range_m, self.snr_at_reference_db, self.baseline_snr_db
        )
        .unwrap();
        writeln!(
            s,
            "range reduction factor            {:.4}",
            self.range_reduction_factor
        )
        .unwrap();
        writeln!(
            s,
            "reduced max range (m)             {:.3}  (baseline {:.3})",
            self.reduced_max_range_m, self.baseline_max_range_m
        )
        .unwrap();
        writeln!(
            s,
            "effective aperture M_eff          {}  of {} ({} at or below {:.1} dB)",
            self.m_eff,
            m,
            self.below_threshold.len(),
            self.threshold_db
        )
        .unwrap();
        s
    }

    /// `(quantity, value)` rows followed by per-state SNR rows.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["quantity", "value"])?;
        let rows = [
            ("total_loss_db", self.total_loss_db.to_string()),
            ("snr_at_reference_db", self.snr_at_reference_db.to_string()),
            ("range_reduction_factor", self.range_reduction_factor.to_string()),
            ("reduced_max_range_m", self.reduced_max_range_m.to_string()),
            ("m_eff", self.m_eff.to_string()),
        ];
        for (k, v) in rows {
            wtr.write_record([k, v.as_str()])?;
        }
        for (m, snr) in self.per_state_snr_db.iter().enumerate() {
            wtr.write_record([format!("state_{m}_snr_db"), snr.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}
