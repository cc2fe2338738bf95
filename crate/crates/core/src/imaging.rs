//! Near-field coherent focusing over a planar grid and image-quality metrics.
//!
//! Every usable state contributes its normalized range profile, read at the
//! distance from the candidate point to that state's virtual sample and
//! phase-compensated for the round trip:
//!
//! ```text
//! Z(p) = Σ_{m ∈ 𝓜} Ŷ_m(‖p − x̂_m‖) · exp(+j 4π f_m ‖p − x̂_m‖ / c)
//! ```

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{RangeProfile, UsableSet};
use crate::{Complex64, Vec3, SPEED_OF_LIGHT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImagingError {
    #[error("no usable frequency states")]
    EmptyUsable,
    #[error("usable state {0} has no normalized profile or sample position")]
    MissingState(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("image is identically zero")]
    ZeroImage,
}

/// Planar grid centered on `origin`, spanned by orthonormal `axis_u`, `axis_v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagingGrid {
    pub origin: Vec3,
    pub axis_u: Vec3,
    pub axis_v: Vec3,
    /// Full extent along `axis_u` (m).
    pub extent_u: f64,
    pub extent_v: f64,
    pub spacing: f64,
}

impl Default for ImagingGrid {
    /// The z = 0 plane, x ∈ [−0.5, 0.5] m, y ∈ [0.1, 1.1] m, 5 mm spacing.
    fn default() -> Self {
        Self {
            origin: Vec3::new(0.0, 0.6, 0.0),
            axis_u: Vec3::x(),
            axis_v: Vec3::y(),
            extent_u: 1.0,
            extent_v: 1.0,
            spacing: 5e-3,
        }
    }
}

impl ImagingGrid {
    /// Square grid of `extent` metres in the z = `center.z` plane.
    pub fn square_around(center: Vec3, extent: f64, spacing: f64) -> Self {
        Self {
            origin: center,
            axis_u: Vec3::x(),
            axis_v: Vec3::y(),
            extent_u: extent,
            extent_v: extent,
            spacing,
        }
    }

    pub fn validate(&self) -> Result<(), ImagingError> {
        let bad = |s: String| Err(ImagingError::InvalidGrid(s));
        if !(self.spacing > 0.0) {
            return bad(format!("spacing must be > 0, got {}", self.spacing));
        }
        if !(self.extent_u >= 0.0 && self.extent_v >= 0.0) {
            return bad("extents must be >= 0".into());
        }
        let (u, v) = (&self.axis_u, &self.axis_v);
        if (u.norm() - 1.0).abs() > 1e-9 || (v.norm() - 1.0).abs() > 1e-9 || u.dot(v).abs() > 1e-9 {
            return bad("axes must be orthonormal".into());
        }
        Ok(())
    }

    pub fn n_u(&self) -> usize {
        (self.extent_u / self.spacing).round() as usize + 1
    }

    pub fn n_v(&self) -> usize {
        (self.extent_v / self.spacing).round() as usize + 1
    }

    pub fn len(&self) -> usize {
        self.n_u() * self.n_v()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid point `(i, j)` along `(axis_u, axis_v)`.
    pub fn point(&self, i: usize, j: usize) -> Vec3 {
        let half_u = 0.5 * (self.n_u() - 1) as f64;
        let half_v = 0.5 * (self.n_v() - 1) as f64;
        self.origin
            + self.axis_u * ((i as f64 - half_u) * self.spacing)
            + self.axis_v * ((j as f64 - half_v) * self.spacing)
    }

    /// Point at linear index `j·n_u + i`.
    pub fn point_at(&self, index: usize) -> Vec3 {
        let n_u = self.n_u();
        self.point(index % n_u, index / n_u)
    }

    /// Half the cell diagonal: worst-case distance to the nearest grid point.
    pub fn quantization_bound(&self) -> f64 {
        self.spacing * std::f64::consts::SQRT_2 / 2.0
    }
}

/// Round-trip phase compensation `exp(+j4π f r / c)`.
pub fn focus_kernel(f: f64, r: f64) -> Complex64 {
    Complex64::from_polar(1.0, 4.0 * PI * f * r / SPEED_OF_LIGHT)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FocusedImage {
    pub grid: ImagingGrid,
    /// States combined, ascending.
    pub usable: Vec<usize>,
    /// Row-major over `(v, u)`: index `j·n_u + i`.
    pub values: Vec<Complex64>,
}

fn check_inputs(profiles: &[RangeProfile], positions: &[Vec3], usable: &UsableSet) -> Result<(), ImagingError> {
    if usable.is_empty() {
        return Err(ImagingError::EmptyUsable);
    }
    for &m in &usable.members {
        if m >= profiles.len() || m >= positions.len() || profiles[m].state != m {
            return Err(ImagingError::MissingState(m));
        }
    }
    Ok(())
}

fn focus_point(profiles: &[RangeProfile], positions: &[Vec3], members: &[usize], p: &Vec3) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for &m in members {
        let r = (p - positions[m]).norm();
        let prof = &profiles[m];
        acc += prof.interpolate(r) * focus_kernel(prof.timing.f_center, r);
    }
    acc
}

/// Coherent focusing at one point.
///
/// `profiles[m]` and `positions[m]` are the normalized profile and the
/// calibrated virtual sample of state `m`.
pub fn focus_at(
    profiles: &[RangeProfile],
    positions: &[Vec3],
    usable: &UsableSet,
    point: &Vec3,
) -> Result<Complex64, ImagingError> {
    check_inputs(profiles, positions, usable)?;
    Ok(focus_point(profiles, positions, &usable.members, point))
}

/// Coherent focusing over `grid`; rows are evaluated in parallel, each point
/// accumulates states in ascending order.
pub fn focus(
    profiles: &[RangeProfile],
    positions: &[Vec3],
    grid: &ImagingGrid,
    usable: &UsableSet,
) -> Result<FocusedImage, ImagingError> {
    grid.validate()?;
    check_inputs(profiles, positions, usable)?;
    let n_u = grid.n_u();
    let mut values = vec![Complex64::new(0.0, 0.0); grid.len()];
    values.par_chunks_mut(n_u).enumerate().for_each(|(j, row)| {
        for (i, z) in row.iter_mut().enumerate() {
            *z = focus_point(profiles, positions, &usable.members, &grid.point(i, j));
        }
    });
    Ok(FocusedImage {
        grid: *grid,
        usable: usable.members.clone(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub peak_index: usize,
    pub peak_position: Vec3,
    pub peak_magnitude: f64,
    /// `None` when no local maximum exists outside the main lobe.
    pub pslr_db: Option<f64>,
    /// Largest extent of the −3 dB main lobe along either grid axis (m).
    pub width_3db: f64,
}

impl ImageMetrics {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p = self.peak_position;
        writeln!(s, "peak_position_m = [{:.6}, {:.6}, {:.6}]", p.x, p.y, p.z).unwrap();
        writeln!(s, "peak_magnitude = {:.6e}", self.peak_magnitude).unwrap();
        match self.pslr_db {
            Some(v) => writeln!(s, "pslr_db = {v:.3}").unwrap(),
            None => writeln!(s, "pslr_db = none").unwrap(),
        }
        writeln!(s, "width_3db_m = {:.4}", self.width_3db).unwrap();
        s
    }
}

impl FocusedImage {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.values.iter().map(|z| z.norm()).collect()
    }

    /// Global argmax of `|Z|`; ties resolve to the lowest linear index.
    pub fn peak(&self) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, z) in self.values.iter().enumerate() {
            let a = z.norm();
            if a > best.1 {
                best = (k, a);
            }
        }
        best
    }

    /// `|Z|` in dB relative to the peak.
    pub fn magnitude_db(&self) -> Vec<f64> {
        let (_, peak) = self.peak();
        self.values.iter().map(|z| 20.0 * (z.norm() / peak).log10()).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["x_m", "y_m", "z_m", "real", "imag", "magnitude_db"])?;
        let db = self.magnitude_db();
        for (k, (z, d)) in self.values.iter().zip(&db).enumerate() {
            let p = self.grid.point_at(k);
            wtr.serialize((p.x, p.y, p.z, z.re, z.im, d))?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Plain-text graymap of `|Z|` over a `dynamic_range_db` window below
    /// the peak; the first row is the largest `v`.
    pub fn to_pgm(&self, dynamic_range_db: f64) -> String {
        let (n_u, n_v) = (self.grid.n_u(), self.grid.n_v());
        let db = self.magnitude_db();
        let mut s = format!("P2\n{n_u} {n_v}\n255\n");
        for j in (0..n_v).rev() {
            let row: Vec<String> = (0..n_u)
                .map(|i| {
                    let v = db[j * n_u + i];
                    let level = ((v + dynamic_range_db) / dynamic_range_db).clamp(0.0, 1.0);
                    ((level * 255.0).round() as u8).to_string()
                })
                .collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Peak, −3 dB main-lobe width and peak-to-sidelobe ratio.
///
/// The main lobe is the 4-connected region around the peak with
/// `|Z| ≥ peak/√2`. Sidelobes are local maxima (no larger 8-neighbour)
/// outside it.
pub fn image_metrics(img: &FocusedImage) -> Result<ImageMetrics, ImagingError> {
    let (peak_index, peak) = img.peak();
    if !(peak > 0.0) {
        return Err(ImagingError::ZeroImage);
    }
    let (n_u, n_v) = (img.grid.n_u(), img.grid.n_v());
    let mag = img.magnitudes();
    let level = peak / std::f64::consts::SQRT_2;

    let mut in_lobe = vec![false; mag.len()];
    let mut queue = VecDeque::from([peak_index]);
    in_lobe[peak_index] = true;
    let (mut i_lo, mut i_hi) = (peak_index % n_u, peak_index % n_u);
    let (mut j_lo, mut j_hi) = (peak_index / n_u, peak_index / n_u);
    while let Some(k) = queue.pop_front() {
        let (i, j) = (k % n_u, k / n_u);
        i_lo = i_lo.min(i);
        i_hi = i_hi.max(i);
        j_lo = j_lo.min(j);
        j_hi = j_hi.max(j);
        let mut visit = |ii: usize, jj: usize| {
            let kk = jj * n_u + ii;
            if !in_lobe[kk] && mag[kk] >= level {
                in_lobe[kk] = true;
                queue.push_back(kk);
            }
        };
        if i > 0 {
            visit(i - 1, j);
        }
        if i + 1 < n_u {
            visit(i + 1, j);
        }
        if j > 0 {
            visit(i, j - 1);
        }
        if j + 1 < n_v {
            visit(i, j + 1);
        }
    }
    let width = ((i_hi - i_lo + 1).max(j_hi - j_lo + 1)) as f64 * img.grid.spacing;

    let mut sidelobe: f64 = 0.0;
    for j in 0..n_v {
        for i in 0..n_u {
            let k = j * n_u + i;
            if in_lobe[k] || mag[k] <= sidelobe || mag[k] == 0.0 {
                continue;
            }
            let mut is_max = true;
            'n: for dj in -1i64..=1 {
                for di in -1i64..=1 {
                    let (ii, jj) = (i as i64 + di, j as i64 + dj);
                    if (di, dj) == (0, 0) || ii < 0 || jj < 0 || ii >= n_u as i64 || jj >= n_v as i64 {
                        continue;
                    }
                    if mag[jj as usize * n_u + ii as usize] > mag[k] {
                        is_max = false;
                        break 'n;
                    }
                }
            }
            if is_max {
                sidelobe = mag[k];
            }
        }
    }

    Ok(ImageMetrics {
        peak_index,
        peak_position: img.grid.point_at(peak_index),
        peak_magnitude: peak,
        pslr_db: (sidelobe > 0.0).then(|| 20.0 * (peak / sidelobe).log10()),
        width_3db: width,
    })
}

/// Distance from the image peak to `true_position`.
pub fn localization_error(metrics: &ImageMetrics, true_position: &Vec3) -> f64 {
    (metrics.peak_position - true_position).norm()
}
