//! Inversion of the indicator curve: decay-rate estimate of l(D,B), sign
//! classification of the contrast, and the region estimate on a voxel grid.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, MediumSpec};
use crate::indicator::{IndicatorCurve, IndicatorRow};
use crate::shapes::{BallSpec, Shape};
use crate::wave::SignClass;
use crate::Point3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    /// Fraction of the τ ladder, counted from the top, used for the fit.
    pub window: f64,
    /// Include a log τ regressor.
    pub log_tau: bool,
    pub min_rows: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { window: 0.4, log_tau: true, min_rows: 6 }
    }
}

/// Result of [`decay_rate_fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub config_hash: String,
    pub l_hat: f64,
    pub stderr: f64,
    pub slope: f64,
    pub intercept: f64,
    pub log_tau_coefficient: Option<f64>,
    pub window: [f64; 2],
    pub rows_used: usize,
    pub residual_rms: f64,
    pub horizon: f64,
    /// Set when T ≤ 2·l_hat, where the decay-rate formula does not apply.
    pub regime_violation: bool,
    pub l_db_reference: Option<f64>,
}

/// Rows in the top `window` fraction of the ladder.
pub fn window_rows(curve: &IndicatorCurve, window: f64) -> &[IndicatorRow] {
    let n = curve.rows.len();
    let k = ((window * n as f64) - 1e-9).ceil().clamp(0.0, n as f64) as usize;
    &curve.rows[n - k..]
}

/// Least squares with coefficient standard errors.
fn least_squares(a: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>, f64)> {
    let (n, p) = a.shape();
    let ata = a.transpose() * a;
    let inv = ata.clone().try_inverse().ok_or_else(|| Error::InsufficientData("singular regression design".into()))?;
    let coef = &inv * a.transpose() * y;
    let resid = y - a * &coef;
    let rss = resid.norm_squared();
    let dof = n.saturating_sub(p).max(1) as f64;
    let s2 = rss / dof;
    let se = DVector::from_iterator(p, (0..p).map(|i| (s2 * inv[(i, i)]).sqrt()));
    Ok((coef, se, (rss / n as f64).sqrt()))
}

/// Fits log|I_f| = c + s·τ (+ b·log τ) on the uncensored rows of the top
/// window and returns l_hat = −s/2.
pub fn decay_rate_fit(curve: &IndicatorCurve, opts: &FitOptions) -> Result<FitReport> {
    if !(opts.window > 0.0 && opts.window <= 1.0) {
        return Err(Error::Config("fit window must be in (0, 1]".into()));
    }
    let rows: Vec<&IndicatorRow> = window_rows(curve, opts.window).iter().filter(|r| !r.censored).collect();
    let p = if opts.log_tau { 3 } else { 2 };
    let need = opts.min_rows.max(p + 1);
    if rows.len() < need {
        return Err(Error::InsufficientData(format!("{} uncensored rows in the fit window, need {need}", rows.len())));
    }
    let n = rows.len();
    let a = DMatrix::from_fn(n, p, |i, j| match j {
        0 => 1.0,
        1 => rows[i].tau,
        _ => rows[i].tau.ln(),
    });
    let y = DVector::from_iterator(n, rows.iter().map(|r| r.indicator.abs().ln()));
    let (coef, se, rms) = least_squares(&a, &y)?;
    let l_hat = -coef[1] / 2.0;
    let horizon = curve.meta.horizon;
    Ok(FitReport {
        config_hash: curve.meta.config_hash.clone(),
        l_hat,
        stderr: se[1] / 2.0,
        slope: coef[1],
        intercept: coef[0],
        log_tau_coefficient: opts.log_tau.then(|| coef[2]),
        window: [rows[0].tau, rows[n - 1].tau],
        rows_used: n,
        residual_rms: rms,
        horizon,
        regime_violation: horizon <= 2.0 * l_hat,
        l_db_reference: curve.meta.l_db_reference,
    })
}

/// Outcome of [`classify_contrast`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contrast {
    APlus,
    AMinus,
    Indeterminate,
}

impl Contrast {
    pub fn matches(&self, class: SignClass) -> bool {
        matches!((self, class), (Contrast::APlus, SignClass::APlus) | (Contrast::AMinus, SignClass::AMinus))
    }
}

/// Sign of e^{τT}·I_f over the uncensored rows of the fit window.
pub fn classify_contrast(curve: &IndicatorCurve, window: f64) -> Contrast {
    let rows: Vec<&IndicatorRow> = window_rows(curve, window).iter().filter(|r| !r.censored).collect();
    if rows.is_empty() {
        Contrast::Indeterminate
    } else if rows.iter().all(|r| r.scaled < 0.0) {
        Contrast::APlus
    } else if rows.iter().all(|r| r.scaled > 0.0) {
        Contrast::AMinus
    } else {
        Contrast::Indeterminate
    }
}

/// Regular probe grid in the lower half-space (cell centers of `n` cells per axis).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionGrid {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub n: [usize; 3],
}

impl RegionGrid {
    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|a| !(self.hi[a] > self.lo[a]) || self.n[a] == 0) || !(self.hi[2] < 0.0) {
            return Err(Error::Config("region grid must be a nonempty box below the interface".into()));
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<Point3> {
        let c = |a: usize, i: usize| self.lo[a] + (i as f64 + 0.5) * (self.hi[a] - self.lo[a]) / self.n[a] as f64;
        let mut out = Vec::with_capacity(self.n.iter().product());
        for k in 0..self.n[2] {
            for j in 0..self.n[1] {
                for i in 0..self.n[0] {
                    out.push(Point3::new(c(0, i), c(1, j), c(2, k)));
                }
            }
        }
        out
    }
}

/// Membership of D's sampled points in the region estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Containment {
    pub sampled: usize,
    pub members: usize,
}

impl Containment {
    pub fn holds(&self) -> bool {
        self.sampled > 0 && self.members == self.sampled
    }
}

/// Voxel mask of the region estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub grid: RegionGrid,
    pub threshold: f64,
    pub points: Vec<Point3>,
    pub member: Vec<bool>,
    pub containment: Option<Containment>,
}

impl RegionMask {
    pub fn count(&self) -> usize {
        self.member.iter().filter(|m| **m).count()
    }

    /// Writes `<stem>.bin` (one byte per voxel, x fastest) and `<stem>.csv`.
    pub fn write(&self, dir: &Path, stem: &str, config_hash: &str) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.bin")))?);
        f.write_all(&self.member.iter().map(|m| *m as u8).collect::<Vec<u8>>())?;
        f.flush()?;
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
        w.write_record(["config_hash", "x1", "x2", "x3", "member"])?;
        for (p, m) in self.points.iter().zip(&self.member) {
            w.write_record([config_hash.to_string(), p.x.to_string(), p.y.to_string(), p.z.to_string(), (*m as u8).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Points of D on a lattice of the given spacing, plus its bounding-box center
/// when that lies inside.
pub fn sample_shape(d: &Shape, spacing: f64) -> Vec<Point3> {
    let (lo, hi) = d.bounding_box();
    let n = ((hi - lo) / spacing).map(|v| v.ceil() as usize + 1);
    let mut out = Vec::new();
    for k in 0..n.z {
        for j in 0..n.y {
            for i in 0..n.x {
                let x = lo + Point3::new(i as f64, j as f64, k as f64) * spacing;
                if d.contains(&x) {
                    out.push(x);
                }
            }
        }
    }
    let c = 0.5 * (lo + hi);
    if d.contains(&c) {
        out.push(c);
    }
    out
}

/// E = {x : l(x,p) > l_hat + η/√γ₊} on the probe grid; with a known D,
/// also checks D ⊂ E on a lattice of D points.
pub fn emit_region(l_hat: f64, b: &BallSpec, m: &MediumSpec, grid: &RegionGrid, known: Option<&Shape>) -> Result<RegionMask> {
    if !(l_hat > 0.0) {
        return Err(Error::Domain("l_hat must be positive".into()));
    }
    grid.validate()?;
    let points = grid.points();
    let member = geometry::region_estimate(l_hat, b, m, &points)?;
    let containment = match known {
        Some(d) => {
            let (lo, hi) = d.bounding_box();
            let samples = sample_shape(d, (hi - lo).min() / 8.0);
            let inside = geometry::region_estimate(l_hat, b, m, &samples)?;
            Some(Containment { sampled: samples.len(), members: inside.iter().filter(|v| **v).count() })
        }
        None => None,
    };
    Ok(RegionMask { grid: *grid, threshold: l_hat + b.radius * m.slowness_plus(), points, member, containment })
}
