//! Indicator function I_f(τ,T) = ∫ f (w − v) dx from a matched pair of wave
//! runs, its quadratic bounds, and the continuum gradient energy ∫_D |∇v|².

use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, MediumSpec};
use crate::green::{BallSourceField, KernelOptions};
use crate::quadrature::gauss_legendre;
use crate::shapes::Shape;
use crate::wave::{
    laplace_trace, laplace_window, node_coefficients, perturbed_faces, InclusionSpec, RegionField, RunKind, SignClass,
    SourceSpec, WaveRun,
};
use crate::Point3;

/// Rounding-error multiplier for the censoring floor.
pub const NOISE_ULPS: f64 = 64.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndicatorOptions {
    /// Upper limit of the background Laplace transform v. Defaults to the
    /// full length of the background run; must be at least T.
    pub background_horizon: Option<f64>,
}

/// One indicator evaluation with its rounding floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndicatorValue {
    pub tau: f64,
    pub value: f64,
    pub noise_floor: f64,
}

impl IndicatorValue {
    pub fn censored(&self) -> bool {
        !(self.value.abs() > self.noise_floor)
    }
}

/// Checks that a scattered run and a background run belong together.
pub fn check_runs(perturbed: &WaveRun, background: &WaveRun) -> Result<()> {
    if !matches!(perturbed.kind, RunKind::Scattered(_)) {
        return Err(Error::RunMismatch("first run must hold a scattered (difference) field".into()));
    }
    if !background.is_background() {
        return Err(Error::RunMismatch("second run must be a background run".into()));
    }
    if perturbed.grid != background.grid {
        return Err(Error::RunMismatch("runs use different grids or time steps".into()));
    }
    if perturbed.source != background.source {
        return Err(Error::RunMismatch("runs use different sources".into()));
    }
    if perturbed.medium != background.medium {
        return Err(Error::RunMismatch("runs use different background media".into()));
    }
    Ok(())
}

fn horizons(background: &WaveRun, horizon: f64, opts: &IndicatorOptions) -> Result<(usize, usize)> {
    let g = &background.grid;
    let n_t = g.steps_for(horizon);
    if !(horizon > 0.0) || (g.time(n_t) - horizon).abs() > 0.5 * g.dt || horizon > g.time(g.steps) + 0.5 * g.dt {
        return Err(Error::Config(format!("horizon {horizon} is not within the run (0, {}]", g.time(g.steps))));
    }
    let n_v = match opts.background_horizon {
        Some(tv) => {
            if tv < horizon || tv > g.time(g.steps) + 0.5 * g.dt {
                return Err(Error::Config("background horizon must lie between T and the end of the run".into()));
            }
            g.steps_for(tv)
        }
        None => g.steps,
    };
    Ok((n_t, n_v))
}

fn abs_vec(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.abs()).collect()
}

/// I = ∫₀^T e^{−τt}⟨ρ, u_p − u_b⟩ dt − ∫_T^{T_v} e^{−τt}⟨ρ, u_b⟩ dt for a
/// recorded projection ρ (channel), i.e. ∫ρ(w − v) with v truncated at T_v.
pub fn indicator_channel(
    perturbed: &WaveRun,
    background: &WaveRun,
    channel: &str,
    tau: f64,
    horizon: f64,
    opts: &IndicatorOptions,
) -> Result<IndicatorValue> {
    check_runs(perturbed, background)?;
    if !(tau > 0.0) {
        return Err(Error::Domain("τ must be positive".into()));
    }
    let (n_t, n_v) = horizons(background, horizon, opts)?;
    let missing = || Error::RunMismatch(format!("channel `{channel}` was not recorded"));
    let d = &perturbed.channel(channel).ok_or_else(missing)?.values;
    let sb = &background.channel(channel).ok_or_else(missing)?.values;
    let dt = background.grid.dt;
    let head = laplace_window(d, dt, 0, n_t, tau);
    let tail = laplace_window(sb, dt, n_t, n_v, tau);
    let scale = laplace_window(&abs_vec(d), dt, 0, n_t, tau) + laplace_window(&abs_vec(sb), dt, n_t, n_v, tau);
    Ok(IndicatorValue { tau, value: head - tail, noise_floor: NOISE_ULPS * f64::EPSILON * scale })
}

/// I_f(τ,T) from the ⟨f, ·⟩ channel of the runs.
pub fn indicator_value(
    perturbed: &WaveRun,
    background: &WaveRun,
    source: &SourceSpec,
    tau: f64,
    horizon: f64,
    opts: &IndicatorOptions,
) -> Result<IndicatorValue> {
    if *source != background.source {
        return Err(Error::RunMismatch("source differs from the one used in the runs".into()));
    }
    indicator_channel(perturbed, background, "f", tau, horizon, opts)
}

/// I_f(τ,T) as Σ_q f(x_q)h³ (w(x_q) − v(x_q)) from the node traces, with w
/// and v from [`laplace_trace`]. Needs node traces and T = T_v = run length.
pub fn indicator_from_nodes(perturbed: &WaveRun, background: &WaveRun, tau: f64) -> Result<f64> {
    check_runs(perturbed, background)?;
    let d = laplace_trace(perturbed, tau)?;
    let v = laplace_trace(background, tau)?;
    // The scattered run stores d = u_p − u_b, so w = v + d.
    let w: Vec<f64> = v.iter().zip(&d).map(|(a, b)| a + b).collect();
    Ok(background.weights.iter().zip(w.iter().zip(&v)).map(|(f, (w, v))| f * (w - v)).sum())
}

/// Geometric ladder of `count` values ending at `tau_max` with ratio `ratio`.
pub fn tau_ladder(tau_max: f64, ratio: f64, count: usize) -> Vec<f64> {
    (0..count).map(|j| tau_max * ratio.powi(j as i32 - (count as i32 - 1))).collect()
}

/// Largest τ with at least `samples_per_efold` time steps per e-fold of e^{−τt}.
pub fn tau_max_for_step(dt: f64, samples_per_efold: f64) -> f64 {
    1.0 / (samples_per_efold * dt)
}

/// Largest τ at which the fastest spatial decay of the Laplace transform,
/// τ/√γ₋ in the slow layer, stays below `decay_per_cell` e-folds per cell.
pub fn tau_max_for_spacing(spacing: f64, medium: &MediumSpec, decay_per_cell: f64) -> f64 {
    decay_per_cell * medium.gamma_minus.sqrt() / spacing
}

/// Quadratic forms bracketing the indicator on the grid around D:
/// lower = Σ (γ_b − γ_p)|ΔV|² h and upper = Σ γ_b(γ_b − γ_p)/γ_p |ΔV|² h
/// over the faces where the perturbed coefficient differs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticBounds {
    pub lower: f64,
    pub upper: f64,
}

pub fn quadratic_bounds(region: &RegionField, tau: f64, medium: &MediumSpec, inclusion: &InclusionSpec) -> Result<QuadraticBounds> {
    let ti = region
        .taus
        .iter()
        .position(|t| *t == tau)
        .ok_or_else(|| Error::Config(format!("τ = {tau} is not among the accumulated region transforms")))?;
    let v = &region.values[ti];
    let coeffs = node_coefficients(&region.grid, medium, inclusion, region.region, region.volume_samples);
    let h = region.grid.spacing;
    let (mut lower, mut upper) = (0.0, 0.0);
    for f in perturbed_faces(&coeffs) {
        let dv = v[f.b] - v[f.a];
        let q = dv * dv * h;
        lower += (f.background - f.perturbed) * q;
        upper += f.background * (f.background - f.perturbed) / f.perturbed * q;
    }
    Ok(QuadraticBounds { lower, upper })
}

/// Row of an [`IndicatorCurve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorRow {
    pub tau: f64,
    pub indicator: f64,
    /// e^{τT}·I_f.
    pub scaled: f64,
    /// −(1/τ)·log|I_f|.
    pub rate: f64,
    pub noise_floor: f64,
    pub censored: bool,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl IndicatorRow {
    pub fn new(v: IndicatorValue, horizon: f64, bounds: Option<QuadraticBounds>) -> Self {
        let ln = v.value.abs().ln();
        Self {
            tau: v.tau,
            indicator: v.value,
            scaled: v.value.signum() * (ln + v.tau * horizon).exp(),
            rate: -ln / v.tau,
            noise_floor: v.noise_floor,
            censored: v.censored(),
            lower: bounds.map(|b| b.lower),
            upper: bounds.map(|b| b.upper),
        }
    }
}

/// Sidecar metadata of a curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveMeta {
    pub config_hash: String,
    pub horizon: f64,
    pub background_horizon: f64,
    pub l_db_reference: Option<f64>,
    pub sign_class: Option<SignClass>,
    pub fit_window: Option<[f64; 2]>,
    pub spacing: f64,
    pub dt: f64,
}

/// Table τ → I_f(τ,T) with metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorCurve {
    pub meta: CurveMeta,
    pub rows: Vec<IndicatorRow>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    config_hash: String,
    tau: f64,
    indicator: f64,
    scaled: f64,
    rate: f64,
    noise_floor: f64,
    censored: bool,
    lower: Option<f64>,
    upper: Option<f64>,
}

impl CsvRow {
    fn new(hash: &str, r: &IndicatorRow) -> Self {
        Self {
            config_hash: hash.to_string(),
            tau: r.tau,
            indicator: r.indicator,
            scaled: r.scaled,
            rate: r.rate,
            noise_floor: r.noise_floor,
            censored: r.censored,
            lower: r.lower,
            upper: r.upper,
        }
    }

    fn row(&self) -> IndicatorRow {
        IndicatorRow {
            tau: self.tau,
            indicator: self.indicator,
            scaled: self.scaled,
            rate: self.rate,
            noise_floor: self.noise_floor,
            censored: self.censored,
            lower: self.lower,
            upper: self.upper,
        }
    }
}

impl IndicatorCurve {
    /// Evaluates the curve on a strictly increasing τ ladder. Bounds are
    /// attached when the background run carries region transforms for a τ.
    pub fn build(
        perturbed: &WaveRun,
        background: &WaveRun,
        taus: &[f64],
        horizon: f64,
        opts: &IndicatorOptions,
        config_hash: &str,
        l_db_reference: Option<f64>,
    ) -> Result<Self> {
        if taus.windows(2).any(|w| !(w[1] > w[0])) || taus.is_empty() {
            return Err(Error::Config("τ ladder must be nonempty and strictly increasing".into()));
        }
        let inclusion = match &perturbed.kind {
            RunKind::Scattered(inc) => inc.clone(),
            RunKind::Background => return Err(Error::RunMismatch("first run must hold a scattered field".into())),
        };
        let (_, n_v) = horizons(background, horizon, opts)?;
        let mut rows = Vec::with_capacity(taus.len());
        for &tau in taus {
            let v = indicator_channel(perturbed, background, "f", tau, horizon, opts)?;
            let bounds = match &background.region {
                Some(r) if r.taus.contains(&tau) => Some(quadratic_bounds(r, tau, &background.medium, &inclusion)?),
                _ => None,
            };
            rows.push(IndicatorRow::new(v, horizon, bounds));
        }
        Ok(Self {
            meta: CurveMeta {
                config_hash: config_hash.to_string(),
                horizon,
                background_horizon: background.grid.time(n_v),
                l_db_reference,
                sign_class: Some(inclusion.sign_class),
                fit_window: None,
                spacing: background.grid.spacing,
                dt: background.grid.dt,
            },
            rows,
        })
    }

    pub fn uncensored(&self) -> impl Iterator<Item = &IndicatorRow> {
        self.rows.iter().filter(|r| !r.censored)
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
        for r in &self.rows {
            w.serialize(CsvRow::new(&self.meta.config_hash, r))?;
        }
        w.flush()?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&self.meta)? + "\n")?;
        Ok(())
    }

    /// Reads a curve written by [`write`](Self::write); every row must carry
    /// the sidecar's config hash.
    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let meta: CurveMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let mut rdr = csv::Reader::from_path(dir.join(format!("{stem}.csv")))?;
        let mut rows = Vec::new();
        for rec in rdr.deserialize() {
            let r: CsvRow = rec?;
            if r.config_hash != meta.config_hash {
                return Err(Error::RunMismatch(format!("row hash {} does not match sidecar {}", r.config_hash, meta.config_hash)));
            }
            rows.push(r.row());
        }
        if rows.windows(2).any(|w| !(w[1].tau > w[0].tau)) {
            return Err(Error::Format("τ column is not strictly increasing".into()));
        }
        Ok(Self { meta, rows })
    }
}

/// Bound violations of a curve and the fit of their decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichFit {
    /// (τ, amount by which I_f leaves [lower, upper]) for violating rows.
    pub violations: Vec<(f64, f64)>,
    pub checked: usize,
    /// κ, b and C in slack(τ) = C·τ^b·e^{−κτ}, fitted when at least three
    /// rows violate.
    pub rate: Option<f64>,
    pub power: Option<f64>,
    pub constant: Option<f64>,
}

impl SandwichFit {
    /// No violations, or a fitted slack decaying at least at `min_rate`.
    pub fn holds(&self, min_rate: f64) -> bool {
        self.checked > 0 && (self.violations.is_empty() || self.rate.is_some_and(|k| k >= min_rate))
    }
}

/// Checks lower ≤ I_f ≤ upper on the uncensored rows carrying bounds and
/// fits ln(violation) = ln C + b·ln τ − κτ over the violating rows.
pub fn sandwich_slack(curve: &IndicatorCurve) -> SandwichFit {
    let mut violations = Vec::new();
    let mut checked = 0;
    for r in curve.uncensored() {
        if let (Some(lo), Some(hi)) = (r.lower, r.upper) {
            checked += 1;
            let v = (lo - r.indicator).max(r.indicator - hi);
            if v > 0.0 {
                violations.push((r.tau, v));
            }
        }
    }
    let (mut rate, mut power, mut constant) = (None, None, None);
    if violations.len() >= 3 {
        let n = violations.len();
        let a = DMatrix::from_fn(n, 3, |i, j| match j {
            0 => 1.0,
            1 => violations[i].0,
            _ => violations[i].0.ln(),
        });
        let y = DVector::from_iterator(n, violations.iter().map(|(_, v)| v.ln()));
        if let Ok(c) = a.svd(true, true).solve(&y, 1e-14) {
            rate = Some(-c[1]);
            power = Some(c[2]);
            constant = Some(c[0].exp());
        }
    }
    SandwichFit { violations, checked, rate, power, constant }
}

fn top_scaled(curve: &IndicatorCurve, fraction: f64) -> Vec<f64> {
    let n = curve.rows.len();
    let k = ((fraction * n as f64) - 1e-9).ceil().clamp(0.0, n as f64) as usize;
    curve.rows[n - k..].iter().filter(|r| !r.censored).map(|r| r.scaled.abs()).collect()
}

/// Whether e^{τT}|I_f| strictly decreases over the uncensored rows of the
/// top `fraction` of the ladder (at least two rows).
pub fn scaled_decreasing(curve: &IndicatorCurve, fraction: f64) -> bool {
    let v = top_scaled(curve, fraction);
    v.len() >= 2 && v.windows(2).all(|w| w[1] < w[0])
}

/// Whether e^{τT}|I_f| strictly increases over the uncensored rows of the
/// top `fraction` of the ladder (at least two rows).
pub fn scaled_increasing(curve: &IndicatorCurve, fraction: f64) -> bool {
    let v = top_scaled(curve, fraction);
    v.len() >= 2 && v.windows(2).all(|w| w[1] > w[0])
}

/// Quadrature controls for [`gradient_energy`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyOptions {
    /// Chebyshev nodes per axis of the background-field table.
    pub table_nodes: usize,
    /// Gauss–Legendre nodes per radial and polar panel.
    pub panel_nodes: usize,
    pub azimuth_nodes: usize,
    #[serde(skip)]
    pub kernel: KernelOptions,
}

impl Default for EnergyOptions {
    fn default() -> Self {
        Self { table_nodes: 12, panel_nodes: 8, azimuth_nodes: 24, kernel: KernelOptions::default() }
    }
}

/// ln ∫_D |∇v|² with v the continuum background field of the source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientEnergy {
    pub tau: f64,
    pub log_energy: f64,
    /// −(1/τ)·ln ∫_D |∇v|².
    pub rate: f64,
    pub nodes: usize,
    pub table_error: f64,
}

/// Panel breakpoints 0, w, 2w, 4w, … capped at `end`.
fn graded_breaks(w: f64, end: f64) -> Vec<f64> {
    let mut b = vec![0.0];
    let mut x = w;
    while x < end {
        b.push(x);
        x *= 2.0;
    }
    b.push(end);
    b
}

fn panel_rule(breaks: &[f64], gl: &(Vec<f64>, Vec<f64>)) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        for (x, wt) in gl.0.iter().zip(&gl.1) {
            out.push((0.5 * (a + b) + 0.5 * (b - a) * x, 0.5 * (b - a) * wt));
        }
    }
    out
}

/// ∫_D |∇v(x)|² dx for v = ∫_B Φ_τ(·, y) f(y) dy with a radial profile.
///
/// Each ellipsoidal piece of D is mapped to the unit ball and integrated in
/// spherical coordinates whose pole points at the optimal point x* of
/// l(D, B); radial and polar panels are graded toward the pole at the
/// e-folding scales of e^{−2τl}. Points covered by an earlier piece of a
/// union are skipped.
pub fn gradient_energy(d: &Shape, source: &SourceSpec, m: &MediumSpec, tau: f64, opts: &EnergyOptions) -> Result<GradientEnergy> {
    d.validate()?;
    source.validate()?;
    let sd = geometry::optical_distance_sets(d, &source.ball, m)?;
    let (lo, hi) = d.bounding_box();
    let p = source.ball.p();
    let dx = [(lo.x - p.x).max(0.0).max(p.x - hi.x), (lo.y - p.y).max(0.0).max(p.y - hi.y)];
    let rho_min = (dx[0] * dx[0] + dx[1] * dx[1]).sqrt();
    let rho_max = [lo.x, hi.x]
        .iter()
        .flat_map(|x| [lo.y, hi.y].map(|y| ((x - p.x).powi(2) + (y - p.y).powi(2)).sqrt()))
        .fold(0.0, f64::max);
    let field = BallSourceField::new(
        source.ball,
        source.profile,
        *m,
        tau,
        [rho_min, rho_max],
        [lo.z, hi.z],
        opts.table_nodes,
        &opts.kernel,
    )?;

    let gl = gauss_legendre(opts.panel_nodes);
    let pieces = d.pieces();
    let mut terms: Vec<(f64, f64)> = Vec::new();
    for (ip, piece) in pieces.iter().enumerate() {
        let a = piece.semi_axes;
        let jac = a.x * a.y * a.z;
        let amax = a.max();
        let mut pole = (sd.x_star - piece.center).component_div(&a);
        if pole.norm() == 0.0 {
            pole = Vector3::z();
        }
        let pole = pole.normalize();
        let helper = if pole.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = helper.cross(&pole).normalize();
        let e2 = pole.cross(&e1);
        let radial_w = (m.gamma_minus.sqrt() / (tau * amax)).min(0.5);
        let polar_w = (0.5 / tau.sqrt()).min(0.5);
        let radial = panel_rule(&graded_breaks(radial_w, 1.0), &gl);
        let polar = panel_rule(&graded_breaks(polar_w, std::f64::consts::PI), &gl);
        let nphi = opts.azimuth_nodes;
        for &(s, ws) in &radial {
            let r = 1.0 - s;
            for &(th, wth) in &polar {
                for k in 0..nphi {
                    let ph = 2.0 * std::f64::consts::PI * k as f64 / nphi as f64;
                    let u = r * (th.sin() * (ph.cos() * e1 + ph.sin() * e2) + th.cos() * pole);
                    let x: Point3 = piece.center + a.component_mul(&u);
                    if pieces[..ip].iter().any(|q| q.contains(&x)) {
                        continue;
                    }
                    let w = ws * wth * (2.0 * std::f64::consts::PI / nphi as f64) * r * r * th.sin() * jac;
                    if w == 0.0 {
                        continue;
                    }
                    let (_, g, log_scale) = field.eval(&x)?;
                    terms.push((w * g.norm_squared(), 2.0 * log_scale));
                }
            }
        }
    }
    let top = terms.iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|(w, e)| w * (e - top).exp()).sum();
    if !(sum > 0.0) {
        return Err(Error::Domain("gradient energy vanished".into()));
    }
    let log_energy = sum.ln() + top;
    Ok(GradientEnergy { tau, log_energy, rate: -log_energy / tau, nodes: terms.len(), table_error: field.max_error_estimate })
}
