//! Explicit finite-difference synthesis of the wave data: (∂t² − ∇·γ∇)u = 0
//! with u(0) = 0, ∂t u(0) = f, in a truncated box with graded sponge layers.
//!
//! Discretization: leapfrog in time, the conservative 7-point flux stencil in
//! space with face coefficients equal to the harmonic mean of the adjacent
//! node values. Horizontal nodes sit at integer multiples of the spacing and
//! vertical nodes at half-integer multiples, so the interface x3 = 0 lies
//! midway between two node planes at every resolution.
//!
//! Perturbed media are advanced as background plus difference field: the
//! difference d = u_p − u_b obeys the same scheme with the forcing
//! (L_p − L_b)u_b, which is supported near D. In exact arithmetic this is the
//! same as running both media and subtracting; in floating point it keeps d
//! exactly zero outside the discrete domain of influence of D and its
//! round-off relative to d itself.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, MediumSpec};
use crate::green::SourceProfile;
use crate::quadrature::simpson_weights;
use crate::shapes::{BallSpec, Shape};
use crate::Point3;

/// Largest admissible time step relative to h/(√3·max speed).
pub const CFL_LIMIT: f64 = 0.9;

/// Discretization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub spacing: f64,
    /// Minimum sponge thickness in cells.
    pub sponge_cells: usize,
    /// Minimum sponge thickness in length units, so refined grids keep the
    /// same absorbing layer.
    pub sponge_width: f64,
    /// Minimum margin between the region of interest and the sponge.
    pub margin: f64,
    /// Margin as a fraction of the region's extent along each axis.
    pub margin_fraction: f64,
    /// Time step as a fraction of the CFL limit (ignored when `dt` is set).
    pub cfl_fraction: f64,
    pub dt: Option<f64>,
    /// Sponge damping σ_max = strength · c_max / width.
    pub sponge_strength: f64,
    /// Sub-samples per axis for the inclusion volume fractions.
    pub volume_samples: usize,
    /// Explicit physical region (min corner, max corner); derived when absent.
    pub physical_box: Option<([f64; 3], [f64; 3])>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            spacing: 0.05,
            sponge_cells: 16,
            sponge_width: 0.0,
            margin: 0.3,
            margin_fraction: 0.2,
            cfl_fraction: 1.0,
            dt: None,
            sponge_strength: 30.0,
            volume_samples: 4,
            physical_box: None,
        }
    }
}

/// Constant perturbation h of the coefficient inside D.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HValue {
    Scalar(f64),
    Diagonal([f64; 3]),
}

impl HValue {
    pub fn diagonal(&self) -> [f64; 3] {
        match *self {
            HValue::Scalar(v) => [v; 3],
            HValue::Diagonal(d) => d,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.diagonal().iter().all(|v| *v == 0.0)
    }
}

/// Jump condition: h positive definite (`APlus`) or negative definite (`AMinus`) on D.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignClass {
    APlus,
    AMinus,
}

/// Inclusion D with coefficient γ₀I + h inside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InclusionSpec {
    pub shape: Shape,
    pub h: HValue,
    pub sign_class: SignClass,
}

impl InclusionSpec {
    /// Checks geometry, the sign class against h and ellipticity of γ₋ + h.
    /// h = 0 is accepted as the degenerate inclusion.
    pub fn validate(&self, m: &MediumSpec) -> Result<()> {
        self.shape.validate()?;
        let d = self.h.diagonal();
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("inclusion contrast must be finite".into()));
        }
        if !self.h.is_zero() {
            let ok = match self.sign_class {
                SignClass::APlus => d.iter().all(|v| *v > 0.0),
                SignClass::AMinus => d.iter().all(|v| *v < 0.0),
            };
            if !ok {
                return Err(Error::Config(format!("h = {d:?} does not satisfy the declared class {:?}", self.sign_class)));
            }
        }
        if d.iter().any(|v| m.gamma_minus + v <= 0.0) {
            return Err(Error::Config("γ₋ + h must stay positive definite".into()));
        }
        Ok(())
    }
}

/// Initial velocity f supported in the ball B.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub ball: BallSpec,
    pub profile: SourceProfile,
}

impl SourceSpec {
    pub fn value(&self, x: &Point3) -> f64 {
        self.profile.value((x - self.ball.p()).norm(), self.ball.radius)
    }

    pub fn validate(&self) -> Result<()> {
        self.ball.validate()?;
        self.profile.validate()
    }
}

/// Extra projections of the field recorded alongside ⟨f, u⟩.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelSpec {
    /// f restricted to {x : normal·(x − p) > offset}.
    HalfBall { name: String, normal: [f64; 3], offset: f64 },
    /// Another density, e.g. a receiver ball.
    Density { name: String, source: SourceSpec },
}

/// Laplace transforms of the background field accumulated on the grid box
/// around the inclusions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionLaplaceSpec {
    pub horizon: f64,
    pub taus: Vec<f64>,
}

/// Field copy on a box at a given time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSpec {
    pub time: f64,
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

/// Everything needed for one synthesis: the background plus any number of
/// inclusions advanced in lockstep.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub medium: MediumSpec,
    pub source: SourceSpec,
    pub grid: GridSpec,
    pub duration: f64,
    pub inclusions: Vec<InclusionSpec>,
    pub channels: Vec<ChannelSpec>,
    pub receivers: Vec<Point3>,
    pub node_traces: bool,
    pub region_laplace: Option<RegionLaplaceSpec>,
    pub snapshots: Vec<SnapshotSpec>,
    pub record_energy: bool,
}

impl RunConfig {
    pub fn new(medium: MediumSpec, source: SourceSpec, grid: GridSpec, duration: f64) -> Self {
        Self {
            medium,
            source,
            grid,
            duration,
            inclusions: Vec::new(),
            channels: Vec::new(),
            receivers: Vec::new(),
            node_traces: false,
            region_laplace: None,
            snapshots: Vec::new(),
            record_energy: false,
        }
    }
}

/// Grid geometry shared by all fields of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub spacing: f64,
    pub dt: f64,
    pub steps: usize,
    /// Array dimensions including the sponge and one ghost layer per side.
    pub dims: [usize; 3],
    /// Integer offsets: node (i, j, k) sits at ((i0+i)h, (j0+j)h, (k0+k+½)h).
    pub offsets: [i64; 3],
    /// Physical region (outside the sponge).
    pub physical_lo: [f64; 3],
    pub physical_hi: [f64; 3],
}

impl GridInfo {
    pub fn coord(&self, i: usize, j: usize, k: usize) -> Point3 {
        let h = self.spacing;
        Point3::new(
            (self.offsets[0] + i as i64) as f64 * h,
            (self.offsets[1] + j as i64) as f64 * h,
            ((self.offsets[2] + k as i64) as f64 + 0.5) * h,
        )
    }

    /// Nearest node index to a point (clamped to the array).
    pub fn nearest(&self, x: &Point3) -> [usize; 3] {
        let h = self.spacing;
        let f = |v: f64, off: i64, n: usize| ((v.round() as i64 - off).clamp(0, n as i64 - 1)) as usize;
        [f(x.x / h, self.offsets[0], self.dims[0]), f(x.y / h, self.offsets[1], self.dims[1]), f(x.z / h - 0.5, self.offsets[2], self.dims[2])]
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    /// Step count closest to a horizon.
    pub fn steps_for(&self, horizon: f64) -> usize {
        ((horizon / self.dt).round() as usize).min(self.steps)
    }
}

/// Index box [lo, hi) on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl IndexBox {
    pub fn dims(&self) -> [usize; 3] {
        [self.hi[0] - self.lo[0], self.hi[1] - self.lo[1], self.hi[2] - self.lo[2]]
    }

    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn union(&self, o: &IndexBox) -> IndexBox {
        IndexBox {
            lo: [self.lo[0].min(o.lo[0]), self.lo[1].min(o.lo[1]), self.lo[2].min(o.lo[2])],
            hi: [self.hi[0].max(o.hi[0]), self.hi[1].max(o.hi[1]), self.hi[2].max(o.hi[2])],
        }
    }

    /// Local (box-relative) flat index.
    pub fn local(&self, i: usize, j: usize, k: usize) -> usize {
        let d = self.dims();
        ((k - self.lo[2]) * d[1] + (j - self.lo[1])) * d[0] + (i - self.lo[0])
    }
}

/// Background Laplace transforms V_τ on an index box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionField {
    pub grid: GridInfo,
    pub region: IndexBox,
    pub horizon: f64,
    pub taus: Vec<f64>,
    /// Sub-samples per axis used for the inclusion coefficients.
    pub volume_samples: usize,
    /// One box-local array per τ.
    pub values: Vec<Vec<f64>>,
}

/// Field copy on an index box.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub region: IndexBox,
    pub values: Vec<f64>,
}

/// What a [`WaveRun`] holds.
#[derive(Debug, Clone, PartialEq)]
pub enum RunKind {
    Background,
    /// Difference u_p − u_b for the given inclusion.
    Scattered(InclusionSpec),
}

/// A recorded time series, one value per step 0..=steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub name: String,
    pub values: Vec<f64>,
}

/// Output of [`run`] for one medium.
#[derive(Debug, Clone)]
pub struct WaveRun {
    pub kind: RunKind,
    pub grid: GridInfo,
    pub medium: MediumSpec,
    pub source: SourceSpec,
    /// Quadrature nodes of B and their weights f(x_q)h³.
    pub nodes: Vec<Point3>,
    pub weights: Vec<f64>,
    /// Channel 0 is ⟨f, u⟩ = Σ f(x_q)h³ u(x_q); the rest follow the config.
    pub channels: Vec<Trace>,
    pub receivers: Vec<(Point3, Vec<f64>)>,
    /// u(x_q, t_n) at index n·nodes + q, when requested.
    pub node_traces: Option<Vec<f64>>,
    pub region: Option<RegionField>,
    pub snapshots: Vec<Snapshot>,
    /// Discrete energy E^{n+½} (background only, when requested).
    pub energy: Vec<f64>,
}

impl WaveRun {
    pub fn channel(&self, name: &str) -> Option<&Trace> {
        self.channels.iter().find(|c| c.name == name)
    }

    pub fn is_background(&self) -> bool {
        matches!(self.kind, RunKind::Background)
    }
}

fn harmonic(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Region of interest: B, D, and the optimal interface points, plus margins.
fn physical_region(cfg: &RunConfig) -> Result<(Point3, Point3)> {
    if let Some((lo, hi)) = cfg.grid.physical_box {
        return Ok((Point3::from(lo), Point3::from(hi)));
    }
    let b = &cfg.source.ball;
    let mut lo = b.p() - Point3::repeat(b.radius);
    let mut hi = b.p() + Point3::repeat(b.radius);
    for inc in &cfg.inclusions {
        let (l, h) = inc.shape.bounding_box();
        lo = lo.inf(&l);
        hi = hi.sup(&h);
        let sd = geometry::optical_distance_sets(&inc.shape, b, &cfg.medium)?;
        let z = geometry::snell_point(&sd.x_star, &sd.y_star, &cfg.medium)?.z_prime;
        let zt = geometry::lift(&z);
        lo = lo.inf(&zt);
        hi = hi.sup(&zt);
    }
    let ext = hi - lo;
    let pad = ext.map(|e| (cfg.grid.margin_fraction * e).max(cfg.grid.margin));
    Ok((lo - pad, hi + pad))
}

impl GridSpec {
    /// Sponge thickness in cells at this spacing.
    pub fn sponge_thickness(&self) -> usize {
        self.sponge_cells.max((self.sponge_width / self.spacing - 1e-9).ceil() as usize)
    }
}

fn layout(cfg: &RunConfig) -> Result<(GridInfo, f64)> {
    let g = &cfg.grid;
    let h = g.spacing;
    if !(h > 0.0) || g.sponge_thickness() == 0 || !(cfg.duration > 0.0) {
        return Err(Error::Config("grid spacing, sponge width and duration must be positive".into()));
    }
    let (lo, hi) = physical_region(cfg)?;
    let s = g.sponge_thickness() as i64 + 1;
    let ilo = [(lo.x / h).floor() as i64, (lo.y / h).floor() as i64, (lo.z / h - 0.5).floor() as i64];
    let ihi = [(hi.x / h).ceil() as i64, (hi.y / h).ceil() as i64, (hi.z / h - 0.5).ceil() as i64];
    let offsets = [ilo[0] - s, ilo[1] - s, ilo[2] - s];
    let dims = [
        (ihi[0] - ilo[0] + 1 + 2 * s) as usize,
        (ihi[1] - ilo[1] + 1 + 2 * s) as usize,
        (ihi[2] - ilo[2] + 1 + 2 * s) as usize,
    ];
    let mut c2 = cfg.medium.gamma_plus.max(cfg.medium.gamma_minus);
    for inc in &cfg.inclusions {
        for v in inc.h.diagonal() {
            c2 = c2.max(cfg.medium.gamma_minus + v);
        }
    }
    let c_max = c2.sqrt();
    let limit = CFL_LIMIT * h / (3f64.sqrt() * c_max);
    let dt0 = match g.dt {
        Some(dt) => {
            if dt > limit {
                return Err(Error::Cfl { dt, limit });
            }
            dt
        }
        None => {
            if !(g.cfl_fraction > 0.0 && g.cfl_fraction <= 1.0) {
                return Err(Error::Cfl { dt: g.cfl_fraction * limit, limit });
            }
            g.cfl_fraction * limit
        }
    };
    let steps = (cfg.duration / dt0).ceil() as usize;
    let dt = cfg.duration / steps as f64;
    let info = GridInfo {
        spacing: h,
        dt,
        steps,
        dims,
        offsets,
        physical_lo: [ilo[0] as f64 * h, ilo[1] as f64 * h, (ilo[2] as f64 + 0.5) * h],
        physical_hi: [ihi[0] as f64 * h, ihi[1] as f64 * h, (ihi[2] as f64 + 0.5) * h],
    };
    Ok((info, c_max))
}

/// Damping per axis: quadratic ramp over the sponge cells, zero inside.
fn sponge_profile(n: usize, cells: usize, sigma_max: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let s = cells as f64;
            let from_lo = (cells + 1) as f64 - i as f64;
            let from_hi = i as f64 - (n - 2 - cells) as f64;
            let depth = from_lo.max(from_hi).max(0.0).min(s) / s;
            sigma_max * depth * depth
        })
        .collect()
}

/// Perturbed coefficient data on the inclusion's index box.
struct Overlay {
    region: IndexBox,
    /// Perturbed minus background coefficient of the + face along each axis.
    dface: Vec<[f64; 3]>,
}

/// Volume fraction of the cell around each node covered by the shape.
fn volume_fraction(shape: &Shape, c: &Point3, h: f64, n: usize) -> f64 {
    let mut inside = 0usize;
    for a in 0..n {
        for b in 0..n {
            for d in 0..n {
                let off = |s: usize| h * ((s as f64 + 0.5) / n as f64 - 0.5);
                if shape.contains(&(c + Point3::new(off(a), off(b), off(d)))) {
                    inside += 1;
                }
            }
        }
    }
    inside as f64 / (n * n * n) as f64
}

/// Node coefficients (per axis) of background and perturbed media on a box.
pub struct NodeCoefficients {
    pub region: IndexBox,
    pub background: Vec<f64>,
    pub perturbed: Vec<[f64; 3]>,
}

/// Background and perturbed node coefficients on `region` for `inc`.
pub fn node_coefficients(grid: &GridInfo, m: &MediumSpec, inc: &InclusionSpec, region: IndexBox, samples: usize) -> NodeCoefficients {
    let d = inc.h.diagonal();
    let mut background = Vec::with_capacity(region.len());
    let mut perturbed = Vec::with_capacity(region.len());
    for k in region.lo[2]..region.hi[2] {
        for j in region.lo[1]..region.hi[1] {
            for i in region.lo[0]..region.hi[0] {
                let x = grid.coord(i, j, k);
                let gb = m.gamma_at(x.z);
                let phi = volume_fraction(&inc.shape, &x, grid.spacing, samples.max(1));
                background.push(gb);
                perturbed.push([gb + phi * d[0], gb + phi * d[1], gb + phi * d[2]]);
            }
        }
    }
    NodeCoefficients { region, background, perturbed }
}

/// Index box of an inclusion with a two-node margin.
pub fn inclusion_box(grid: &GridInfo, inc: &InclusionSpec) -> Result<IndexBox> {
    let (lo, hi) = inc.shape.bounding_box();
    let a = grid.nearest(&lo);
    let b = grid.nearest(&hi);
    let s = grid.spacing;
    let inside = |p: &Point3| {
        (0..3).all(|c| p[c] > grid.physical_lo[c] - 0.5 * s && p[c] < grid.physical_hi[c] + 0.5 * s)
    };
    if !inside(&lo) || !inside(&hi) {
        return Err(Error::InclusionInSponge);
    }
    Ok(IndexBox { lo: [a[0] - 3, a[1] - 3, a[2] - 3], hi: [b[0] + 4, b[1] + 4, b[2] + 4] })
}

/// One face of the grid inside a region, with background and perturbed
/// coefficients and the two node indices (box-local).
#[derive(Debug, Clone, Copy)]
pub struct FaceTerm {
    pub a: usize,
    pub b: usize,
    pub background: f64,
    pub perturbed: f64,
}

/// Faces of `coeffs.region` whose perturbed coefficient differs from the background.
pub fn perturbed_faces(coeffs: &NodeCoefficients) -> Vec<FaceTerm> {
    let r = coeffs.region;
    let mut out = Vec::new();
    for k in r.lo[2]..r.hi[2] {
        for j in r.lo[1]..r.hi[1] {
            for i in r.lo[0]..r.hi[0] {
                let a = r.local(i, j, k);
                for axis in 0..3 {
                    let (ni, nj, nk) = match axis {
                        0 => (i + 1, j, k),
                        1 => (i, j + 1, k),
                        _ => (i, j, k + 1),
                    };
                    if ni >= r.hi[0] || nj >= r.hi[1] || nk >= r.hi[2] {
                        continue;
                    }
                    let b = r.local(ni, nj, nk);
                    let gb = harmonic(coeffs.background[a], coeffs.background[b]);
                    let gp = harmonic(coeffs.perturbed[a][axis], coeffs.perturbed[b][axis]);
                    if gp != gb {
                        out.push(FaceTerm { a, b, background: gb, perturbed: gp });
                    }
                }
            }
        }
    }
    out
}

fn overlay_for(grid: &GridInfo, m: &MediumSpec, inc: &InclusionSpec, samples: usize) -> Result<Overlay> {
    let region = inclusion_box(grid, inc)?;
    let coeffs = node_coefficients(grid, m, inc, region, samples);
    let mut dface = vec![[0.0; 3]; region.len()];
    for f in perturbed_faces(&coeffs) {
        let d = region.dims();
        let axis = if f.b == f.a + 1 { 0 } else if f.b == f.a + d[0] { 1 } else { 2 };
        dface[f.a][axis] = f.perturbed - f.background;
    }
    Ok(Overlay { region, dface })
}

/// (L_p − L_b)φ on the overlay box (times h²), written box-locally.
fn overlay_apply(ov: &Overlay, grid: &GridInfo, phi_a: &[f64], phi_b: &[f64], out: &mut [f64]) {
    let r = ov.region;
    let d = r.dims();
    let strides = [1usize, grid.dims[0], grid.dims[0] * grid.dims[1]];
    let lstrides = [1usize, d[0], d[0] * d[1]];
    let val = |c: usize| phi_a[c] + phi_b[c];
    for k in r.lo[2]..r.hi[2] {
        for j in r.lo[1]..r.hi[1] {
            for i in r.lo[0]..r.hi[0] {
                let l = r.local(i, j, k);
                let c = grid.index(i, j, k);
                let pos = [i - r.lo[0], j - r.lo[1], k - r.lo[2]];
                let mut acc = 0.0;
                for axis in 0..3 {
                    let up = ov.dface[l][axis];
                    if up != 0.0 {
                        acc += up * (val(c + strides[axis]) - val(c));
                    }
                    if pos[axis] > 0 {
                        let dn = ov.dface[l - lstrides[axis]][axis];
                        if dn != 0.0 {
                            acc -= dn * (val(c) - val(c - strides[axis]));
                        }
                    }
                }
                out[l] = acc;
            }
        }
    }
}

struct Stencil {
    dims: [usize; 3],
    /// Node coefficient per k, and the + z-face coefficient per k.
    gk: Vec<f64>,
    gz: Vec<f64>,
    sx: Vec<f64>,
    sy: Vec<f64>,
    sz: Vec<f64>,
    dt: f64,
    inv_h2: f64,
}

impl Stencil {
    fn laplacian_at(&self, u: &[f64], c: usize, k: usize) -> f64 {
        let nx = self.dims[0];
        let slab = nx * self.dims[1];
        let uc = u[c];
        (self.gk[k] * (u[c - 1] + u[c + 1] + u[c - nx] + u[c + nx] - 4.0 * uc)
            + self.gz[k] * (u[c + slab] - uc)
            + self.gz[k - 1] * (u[c - slab] - uc))
            * self.inv_h2
    }

    fn sigma(&self, i: usize, j: usize, k: usize) -> f64 {
        self.sx[i] + self.sy[j] + self.sz[k]
    }

    /// prev ← next time level, in place: u^{n+1} = (2uⁿ − (1 − σΔt/2)u^{n−1} + Δt² L uⁿ)/(1 + σΔt/2).
    fn advance(&self, prev: &mut [f64], cur: &[f64]) {
        let [nx, ny, nz] = self.dims;
        let slab = nx * ny;
        let dt = self.dt;
        let dt2 = dt * dt;
        prev.par_chunks_mut(slab).enumerate().for_each(|(k, out)| {
            if k == 0 || k + 1 == nz {
                return;
            }
            for j in 1..ny - 1 {
                let s_jk = self.sy[j] + self.sz[k];
                let row = k * slab + j * nx;
                for i in 1..nx - 1 {
                    let c = row + i;
                    let lu = self.laplacian_at(cur, c, k);
                    let s = s_jk + self.sx[i];
                    let o = &mut out[j * nx + i];
                    if s == 0.0 {
                        *o = 2.0 * cur[c] - *o + dt2 * lu;
                    } else {
                        let h = 0.5 * s * dt;
                        *o = (2.0 * cur[c] - (1.0 - h) * *o + dt2 * lu) / (1.0 + h);
                    }
                }
            }
        });
    }
}

struct Channel {
    name: String,
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl Channel {
    fn project(&self, u: &[f64]) -> f64 {
        self.indices.iter().zip(&self.weights).map(|(&c, &w)| w * u[c]).sum()
    }
}

/// Grid nodes with nonzero weight under a density, with weights ρ(x)h³.
fn density_nodes(grid: &GridInfo, src: &SourceSpec, filter: impl Fn(&Point3) -> bool) -> (Vec<usize>, Vec<Point3>, Vec<f64>) {
    let b = &src.ball;
    let h3 = grid.spacing.powi(3);
    let lo = grid.nearest(&(b.p() - Point3::repeat(b.radius + grid.spacing)));
    let hi = grid.nearest(&(b.p() + Point3::repeat(b.radius + grid.spacing)));
    let (mut idx, mut pts, mut w) = (Vec::new(), Vec::new(), Vec::new());
    for k in lo[2]..=hi[2] {
        for j in lo[1]..=hi[1] {
            for i in lo[0]..=hi[0] {
                let x = grid.coord(i, j, k);
                let f = src.value(&x);
                if f != 0.0 && filter(&x) {
                    idx.push(grid.index(i, j, k));
                    pts.push(x);
                    w.push(f * h3);
                }
            }
        }
    }
    (idx, pts, w)
}

fn snapshot_box(grid: &GridInfo, s: &SnapshotSpec) -> IndexBox {
    let a = grid.nearest(&Point3::from(s.lo));
    let b = grid.nearest(&Point3::from(s.hi));
    IndexBox { lo: a, hi: [b[0] + 1, b[1] + 1, b[2] + 1] }
}

fn copy_box(grid: &GridInfo, r: &IndexBox, u: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(r.len());
    for k in r.lo[2]..r.hi[2] {
        for j in r.lo[1]..r.hi[1] {
            let row = grid.index(0, j, k);
            out.extend_from_slice(&u[row + r.lo[0]..row + r.hi[0]]);
        }
    }
    out
}

/// Discrete energy ½Σ((u¹ − u⁰)/Δt)²h³ + ½Σ_faces γ_f Δu¹Δu⁰ h (staggered in time).
fn discrete_energy(st: &Stencil, h: f64, u0: &[f64], u1: &[f64]) -> f64 {
    let [nx, ny, nz] = st.dims;
    let slab = nx * ny;
    let dt = st.dt;
    let mut kin = 0.0;
    let mut pot = 0.0;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let c = k * slab + j * nx + i;
                let v = (u1[c] - u0[c]) / dt;
                kin += v * v;
                if i + 1 < nx {
                    pot += st.gk[k] * (u1[c + 1] - u1[c]) * (u0[c + 1] - u0[c]);
                }
                if j + 1 < ny {
                    pot += st.gk[k] * (u1[c + nx] - u1[c]) * (u0[c + nx] - u0[c]);
                }
                if k + 1 < nz {
                    pot += st.gz[k] * (u1[c + slab] - u1[c]) * (u0[c + slab] - u0[c]);
                }
            }
        }
    }
    0.5 * kin * h * h * h + 0.5 * pot * h
}

/// Grid and time step a run with this config would use.
pub fn plan(cfg: &RunConfig) -> Result<GridInfo> {
    cfg.source.validate()?;
    for inc in &cfg.inclusions {
        inc.validate(&cfg.medium)?;
    }
    let (grid, _) = layout(cfg)?;
    for inc in &cfg.inclusions {
        inclusion_box(&grid, inc)?;
    }
    Ok(grid)
}

/// Runs the background medium and every configured inclusion in lockstep.
/// Returns the background run followed by one scattered run per inclusion.
pub fn run(cfg: &RunConfig) -> Result<Vec<WaveRun>> {
    cfg.source.validate()?;
    for inc in &cfg.inclusions {
        inc.validate(&cfg.medium)?;
    }
    let (grid, c_max) = layout(cfg)?;
    let [nx, ny, nz] = grid.dims;
    let h = grid.spacing;
    let dt = grid.dt;
    let cells = cfg.grid.sponge_thickness();
    let sigma_max = cfg.grid.sponge_strength * c_max / (cells as f64 * h);
    let gk: Vec<f64> = (0..nz).map(|k| cfg.medium.gamma_at(grid.coord(0, 0, k).z)).collect();
    let gz: Vec<f64> = (0..nz).map(|k| if k + 1 < nz { harmonic(gk[k], gk[k + 1]) } else { gk[k] }).collect();
    let st = Stencil {
        dims: grid.dims,
        gk,
        gz,
        sx: sponge_profile(nx, cells, sigma_max),
        sy: sponge_profile(ny, cells, sigma_max),
        sz: sponge_profile(nz, cells, sigma_max),
        dt,
        inv_h2: 1.0 / (h * h),
    };

    let overlays: Vec<Overlay> =
        cfg.inclusions.iter().map(|inc| overlay_for(&grid, &cfg.medium, inc, cfg.grid.volume_samples)).collect::<Result<_>>()?;

    // Channels: ⟨f, ·⟩ first, then the configured ones.
    let (src_idx, nodes, weights) = density_nodes(&grid, &cfg.source, |_| true);
    let mut channels = vec![Channel { name: "f".into(), indices: src_idx.clone(), weights: weights.clone() }];
    for ch in &cfg.channels {
        match ch {
            ChannelSpec::HalfBall { name, normal, offset } => {
                let n = Point3::from(*normal);
                let p = cfg.source.ball.p();
                let (i, _, w) = density_nodes(&grid, &cfg.source, |x| n.dot(&(x - p)) > *offset);
                channels.push(Channel { name: name.clone(), indices: i, weights: w });
            }
            ChannelSpec::Density { name, source } => {
                source.validate()?;
                let (i, _, w) = density_nodes(&grid, source, |_| true);
                channels.push(Channel { name: name.clone(), indices: i, weights: w });
            }
        }
    }
    if channels.iter().skip(1).any(|c| c.name == "f") {
        return Err(Error::Config("channel name `f` is reserved".into()));
    }
    let receivers: Vec<(Point3, usize)> = cfg
        .receivers
        .iter()
        .map(|x| {
            let [i, j, k] = grid.nearest(x);
            (grid.coord(i, j, k), grid.index(i, j, k))
        })
        .collect();

    // Region Laplace accumulation for the background field.
    let region_box = if cfg.region_laplace.is_some() {
        let mut b: Option<IndexBox> = None;
        for ov in &overlays {
            b = Some(b.map_or(ov.region, |x| x.union(&ov.region)));
        }
        Some(b.ok_or_else(|| Error::Config("region Laplace transforms need at least one inclusion".into()))?)
    } else {
        None
    };
    let region_steps = cfg.region_laplace.as_ref().map(|r| grid.steps_for(r.horizon));
    let region_w = region_steps.map(|n| simpson_weights(n, dt));
    let mut region_acc: Vec<Vec<f64>> = match (&cfg.region_laplace, &region_box) {
        (Some(r), Some(b)) => vec![vec![0.0; b.len()]; r.taus.len()],
        _ => Vec::new(),
    };

    let snaps: Vec<(usize, IndexBox)> =
        cfg.snapshots.iter().map(|s| (grid.steps_for(s.time), snapshot_box(&grid, s))).collect();

    let total = grid.len();
    let n_runs = 1 + cfg.inclusions.len();
    // Field pairs (previous, current) per run; run 0 is the background.
    let mut prev: Vec<Vec<f64>> = vec![vec![0.0; total]; n_runs];
    let mut cur: Vec<Vec<f64>> = vec![vec![0.0; total]; n_runs];

    // Start step from the Taylor expansion with u(0) = 0, u_t(0) = f.
    let mut fvec = vec![0.0; total];
    for k in 1..nz - 1 {
        for j in 1..ny - 1 {
            for i in 1..nx - 1 {
                let x = grid.coord(i, j, k);
                fvec[grid.index(i, j, k)] = cfg.source.value(&x);
            }
        }
    }
    for k in 1..nz - 1 {
        for j in 1..ny - 1 {
            for i in 1..nx - 1 {
                let c = grid.index(i, j, k);
                let s = st.sigma(i, j, k);
                let lf = st.laplacian_at(&fvec, c, k);
                cur[0][c] = dt * fvec[c] - 0.5 * dt * dt * s * fvec[c] + dt * dt * dt / 6.0 * (lf + s * s * fvec[c]);
            }
        }
    }
    let zeros = vec![0.0; total];
    let mut scratch: Vec<Vec<f64>> = overlays.iter().map(|ov| vec![0.0; ov.region.len()]).collect();
    for (r, ov) in overlays.iter().enumerate() {
        overlay_apply(ov, &grid, &fvec, &zeros, &mut scratch[r]);
        let reg = ov.region;
        for k in reg.lo[2]..reg.hi[2] {
            for j in reg.lo[1]..reg.hi[1] {
                for i in reg.lo[0]..reg.hi[0] {
                    cur[r + 1][grid.index(i, j, k)] = dt * dt * dt / 6.0 * scratch[r][reg.local(i, j, k)] * st.inv_h2;
                }
            }
        }
    }
    drop(fvec);

    let steps = grid.steps;
    let mut traces: Vec<Vec<Vec<f64>>> = vec![channels.iter().map(|_| Vec::with_capacity(steps + 1)).collect(); n_runs];
    let mut rec: Vec<Vec<Vec<f64>>> = vec![receivers.iter().map(|_| Vec::with_capacity(steps + 1)).collect(); n_runs];
    let mut node_tr: Vec<Vec<f64>> =
        if cfg.node_traces { vec![Vec::with_capacity((steps + 1) * src_idx.len()); n_runs] } else { Vec::new() };
    let mut snapshots: Vec<Vec<Snapshot>> = vec![Vec::new(); n_runs];
    let mut energy = Vec::new();

    let mut record = |n: usize, fields: &[Vec<f64>], region_acc: &mut Vec<Vec<f64>>| {
        for (r, u) in fields.iter().enumerate() {
            for (c, ch) in channels.iter().enumerate() {
                traces[r][c].push(ch.project(u));
            }
            for (q, (_, c)) in receivers.iter().enumerate() {
                rec[r][q].push(u[*c]);
            }
            if cfg.node_traces {
                node_tr[r].extend(src_idx.iter().map(|&c| u[c]));
            }
            for (s, b) in &snaps {
                if *s == n {
                    snapshots[r].push(Snapshot { step: n, region: *b, values: copy_box(&grid, b, u) });
                }
            }
        }
        if let (Some(spec), Some(b), Some(w), Some(nmax)) = (&cfg.region_laplace, &region_box, &region_w, region_steps) {
            if n <= nmax {
                let vals = copy_box(&grid, b, &fields[0]);
                let t = grid.time(n);
                for (acc, &tau) in region_acc.iter_mut().zip(&spec.taus) {
                    let wt = w[n] * (-tau * t).exp();
                    for (a, v) in acc.iter_mut().zip(&vals) {
                        *a += wt * v;
                    }
                }
            }
        }
    };

    record(0, &prev, &mut region_acc);
    record(1, &cur, &mut region_acc);
    if cfg.record_energy {
        energy.push(discrete_energy(&st, h, &prev[0], &cur[0]));
    }

    for n in 1..steps {
        // Forcing of the difference fields from the current background level.
        for (r, ov) in overlays.iter().enumerate() {
            overlay_apply(ov, &grid, &cur[r + 1], &cur[0], &mut scratch[r]);
        }
        for r in 0..n_runs {
            st.advance(&mut prev[r], &cur[r]);
        }
        for (r, ov) in overlays.iter().enumerate() {
            let reg = ov.region;
            let field = &mut prev[r + 1];
            for k in reg.lo[2]..reg.hi[2] {
                for j in reg.lo[1]..reg.hi[1] {
                    for i in reg.lo[0]..reg.hi[0] {
                        let c = grid.index(i, j, k);
                        let a = 1.0 / (1.0 + 0.5 * st.sigma(i, j, k) * dt);
                        field[c] += a * dt * dt * scratch[r][reg.local(i, j, k)] * st.inv_h2;
                    }
                }
            }
        }
        std::mem::swap(&mut prev, &mut cur);
        record(n + 1, &cur, &mut region_acc);
        if cfg.record_energy {
            energy.push(discrete_energy(&st, h, &prev[0], &cur[0]));
        }
    }

    let region = match (&cfg.region_laplace, region_box) {
        (Some(spec), Some(b)) => Some(RegionField {
            grid,
            region: b,
            horizon: grid.time(region_steps.unwrap_or(0)),
            taus: spec.taus.clone(),
            volume_samples: cfg.grid.volume_samples,
            values: region_acc,
        }),
        _ => None,
    };

    let mut out = Vec::with_capacity(n_runs);
    let mut node_tr = node_tr.into_iter();
    for (r, ((tr, rc), sn)) in traces.into_iter().zip(rec).zip(snapshots).enumerate() {
        out.push(WaveRun {
            kind: if r == 0 { RunKind::Background } else { RunKind::Scattered(cfg.inclusions[r - 1].clone()) },
            grid,
            medium: cfg.medium,
            source: cfg.source,
            nodes: nodes.clone(),
            weights: weights.clone(),
            channels: channels.iter().zip(tr).map(|(c, v)| Trace { name: c.name.clone(), values: v }).collect(),
            receivers: receivers.iter().zip(rc).map(|((p, _), v)| (*p, v)).collect(),
            node_traces: node_tr.next(),
            region: if r == 0 { region.clone() } else { None },
            snapshots: sn,
            energy: if r == 0 { std::mem::take(&mut energy) } else { Vec::new() },
        });
    }
    Ok(out)
}

/// ∫₀^{nΔt} e^{−τt} s(t) dt by composite Simpson over the first `n` intervals.
pub fn laplace_series(values: &[f64], dt: f64, n: usize, tau: f64) -> f64 {
    let n = n.min(values.len().saturating_sub(1));
    let w = simpson_weights(n, dt);
    w.iter().enumerate().map(|(i, wi)| wi * (-tau * i as f64 * dt).exp() * values[i]).sum()
}

/// ∫_{t_a}^{t_b} e^{−τt} s(t) dt over steps [a, b] by composite Simpson.
pub fn laplace_window(values: &[f64], dt: f64, a: usize, b: usize, tau: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let w = simpson_weights(b - a, dt);
    w.iter().enumerate().map(|(i, wi)| wi * (-tau * (a + i) as f64 * dt).exp() * values[a + i]).sum()
}

/// w(x_q, τ) = ∫₀^T e^{−τt} u(t, x_q) dt at every quadrature node of B.
pub fn laplace_trace(run: &WaveRun, tau: f64) -> Result<Vec<f64>> {
    let tr = run.node_traces.as_ref().ok_or_else(|| Error::Config("run was made without node traces".into()))?;
    let q = run.nodes.len();
    let steps = run.grid.steps;
    let w = simpson_weights(steps, run.grid.dt);
    let mut out = vec![0.0; q];
    for (n, wn) in w.iter().enumerate() {
        let e = wn * (-tau * run.grid.time(n)).exp();
        for (o, v) in out.iter_mut().zip(&tr[n * q..(n + 1) * q]) {
            *o += e * v;
        }
    }
    Ok(out)
}

const MAGIC: &[u8; 8] = b"ENCLTRC1";

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| Error::Format("truncated trace file".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64s(w: &mut impl Write, v: &[f64]) -> std::io::Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Contents of a binary trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub spacing: f64,
    pub dt: f64,
    pub dims: [usize; 3],
    pub nodes: Vec<Point3>,
    pub channels: Vec<Trace>,
    pub node_traces: Option<Vec<f64>>,
}

impl From<&WaveRun> for TraceFile {
    fn from(r: &WaveRun) -> Self {
        Self {
            spacing: r.grid.spacing,
            dt: r.grid.dt,
            dims: r.grid.dims,
            nodes: r.nodes.clone(),
            channels: r.channels.clone(),
            node_traces: r.node_traces.clone(),
        }
    }
}

impl TraceFile {
    /// Little-endian layout: magic, dims (3×u64), spacing, dt, node count,
    /// node coordinates, sample count, channel count, then per channel a
    /// name length, UTF-8 name and samples; finally a node-trace flag and
    /// the node traces (step-major) when present.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        for d in self.dims {
            put_u64(&mut w, d as u64)?;
        }
        put_f64s(&mut w, &[self.spacing, self.dt])?;
        put_u64(&mut w, self.nodes.len() as u64)?;
        for p in &self.nodes {
            put_f64s(&mut w, &[p.x, p.y, p.z])?;
        }
        let samples = self.channels.first().map_or(0, |c| c.values.len());
        put_u64(&mut w, samples as u64)?;
        put_u64(&mut w, self.channels.len() as u64)?;
        for c in &self.channels {
            put_u64(&mut w, c.name.len() as u64)?;
            w.write_all(c.name.as_bytes())?;
            if c.values.len() != samples {
                return Err(Error::Format("channels must have equal length".into()));
            }
            put_f64s(&mut w, &c.values)?;
        }
        match &self.node_traces {
            Some(t) => {
                put_u64(&mut w, 1)?;
                put_f64s(&mut w, t)?;
            }
            None => put_u64(&mut w, 0)?,
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = ByteCursor { bytes: &bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::Format("bad magic in trace file".into()));
        }
        let dims = [cur.u64()? as usize, cur.u64()? as usize, cur.u64()? as usize];
        let spacing = cur.f64()?;
        let dt = cur.f64()?;
        let nn = cur.u64()? as usize;
        let mut nodes = Vec::with_capacity(nn);
        for _ in 0..nn {
            nodes.push(Point3::new(cur.f64()?, cur.f64()?, cur.f64()?));
        }
        let samples = cur.u64()? as usize;
        let nc = cur.u64()? as usize;
        let mut channels = Vec::with_capacity(nc);
        for _ in 0..nc {
            let len = cur.u64()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|_| Error::Format("channel name is not UTF-8".into()))?;
            channels.push(Trace { name, values: cur.f64s(samples)? });
        }
        let node_traces = match cur.u64()? {
            0 => None,
            1 => Some(cur.f64s(samples * nn)?),
            _ => return Err(Error::Format("bad node-trace flag".into())),
        };
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes in trace file".into()));
        }
        Ok(Self { spacing, dt, dims, nodes, channels, node_traces })
    }
}

/// One-row-per-quantity CSV summary of a run.
pub fn write_summary_csv(run: &WaveRun, config_hash: &str, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["key", "value"])?;
    let kind = match &run.kind {
        RunKind::Background => "background".to_string(),
        RunKind::Scattered(inc) => format!("scattered:{:?}", inc.sign_class),
    };
    let g = &run.grid;
    let rows: Vec<(&str, String)> = vec![
        ("config_hash", config_hash.to_string()),
        ("kind", kind),
        ("spacing", format!("{:.17e}", g.spacing)),
        ("dt", format!("{:.17e}", g.dt)),
        ("steps", g.steps.to_string()),
        ("duration", format!("{:.17e}", g.time(g.steps))),
        ("dims", format!("{}x{}x{}", g.dims[0], g.dims[1], g.dims[2])),
        ("source_nodes", run.nodes.len().to_string()),
        ("channels", run.channels.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(";")),
        ("final_f_projection", format!("{:.17e}", run.channels[0].values.last().copied().unwrap_or(0.0))),
    ];
    for (k, v) in rows {
        w.write_record([k, v.as_str()])?;
    }
    w.flush()?;
    Ok(())
}
