//! Experiment configs and the end-to-end pipeline: optics scans, kernel
//! tables, wave synthesis, indicator curves, energy rates and inversion.
//!
//! A config is a TOML file. Its hash (SHA-256 of the canonical JSON form of
//! the parsed config, seed included) is embedded in every output.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{self, MediumSpec, SetDistance};
use crate::green::{self, KernelOptions};
use crate::indicator::{
    self, EnergyOptions, GradientEnergy, IndicatorCurve, IndicatorOptions, SandwichFit,
};
use crate::reconstruction::{self, Contrast, FitOptions, FitReport, RegionGrid, RegionMask};
use crate::shapes::Shape;
use crate::wave::{self, GridInfo, GridSpec, InclusionSpec, RegionLaplaceSpec, RunConfig, SourceSpec, TraceFile, WaveRun};
use crate::Point3;

/// Relative tolerance of the recovered l(D,B) against the reference.
pub const L_HAT_TOLERANCE: f64 = 0.10;
/// Smallest fitted exponent of |ratio − 1| in 1/τ for the kernel asymptotics.
pub const RATIO_EXPONENT_MIN: f64 = 0.25;
/// Largest |ratio − 1| at the top of the kernel τ ladder.
pub const RATIO_ERROR_MAX: f64 = 0.1;
/// Supercritical decay rate must reach this fraction of T_{x,z'}(θ₀).
pub const SUPERCRITICAL_RATE_FRACTION: f64 = 0.95;
/// Energy band slack as a fraction of 2l(D,B), and tolerance of the limit.
pub const ENERGY_SLACK_FRACTION: f64 = 0.05;
pub const ENERGY_LIMIT_TOLERANCE: f64 = 0.05;
/// Violation margin of the modified-path identity.
pub const MODIFIED_PATH_MARGIN: f64 = 1e-12;
/// Snell residual accepted in the Fermat scan.
pub const SNELL_RESIDUAL_MAX: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    /// Run length; defaults to `duration_factor`·2·max l(D_k, B).
    pub duration: Option<f64>,
    pub duration_factor: f64,
    pub node_traces: bool,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self { duration: None, duration_factor: 1.5, node_traces: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndicatorSection {
    /// T = factor·2l(D_k, B) for the fitted curve; defaults to the run length.
    pub horizon_factor: Option<f64>,
    /// Additional curves at T = factor·2l(D_k, B), checked for e^{τT}I_f → 0.
    pub monitor_factors: Vec<f64>,
    /// Fraction of the ladder, from the top, over which monitors must decrease.
    pub monitor_fraction: f64,
    pub background_horizon: Option<f64>,
    /// Attach the quadratic bounds to the fitted curve.
    pub bounds: bool,
}

impl Default for IndicatorSection {
    fn default() -> Self {
        Self { horizon_factor: None, monitor_factors: vec![0.8], monitor_fraction: 0.5, background_horizon: None, bounds: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LadderSection {
    /// Explicit top of the ladder; otherwise the smaller of the time-step and
    /// grid-spacing limits below.
    pub tau_max: Option<f64>,
    pub ratio: f64,
    pub count: usize,
    pub samples_per_efold: f64,
    pub decay_per_cell: f64,
}

impl Default for LadderSection {
    fn default() -> Self {
        Self { tau_max: None, ratio: 1.25, count: 20, samples_per_efold: 8.0, decay_per_cell: 0.625 }
    }
}

impl LadderSection {
    pub fn top(&self, grid: &GridInfo, m: &MediumSpec) -> f64 {
        self.tau_max.unwrap_or_else(|| {
            indicator::tau_max_for_step(grid.dt, self.samples_per_efold)
                .min(indicator::tau_max_for_spacing(grid.spacing, m, self.decay_per_cell))
        })
    }

    pub fn taus(&self, grid: &GridInfo, m: &MediumSpec) -> Vec<f64> {
        indicator::tau_ladder(self.top(grid, m), self.ratio, self.count)
    }

    fn validate(&self) -> Result<()> {
        if !(self.ratio > 1.0) || self.count == 0 || self.tau_max.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Config("τ ladder needs ratio > 1, count ≥ 1 and a positive top".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpticsSection {
    /// Random (x, y, γ±) configurations checked against the grid oracle.
    pub fermat_samples: usize,
    pub fermat_grid: usize,
    /// Random (x, y, z') triples for the modified-path identity.
    pub modified_samples: usize,
    /// Configurations whose modified-path minimizer is located on a grid.
    pub localization_samples: usize,
    pub localization_grid: usize,
}

impl Default for OpticsSection {
    fn default() -> Self {
        Self { fermat_samples: 200, fermat_grid: 601, modified_samples: 100_000, localization_samples: 20, localization_grid: 201 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GreenSection {
    pub taus: Vec<f64>,
    pub depth: f64,
    pub height: f64,
    /// sin θ₋ / a₀ of each geometry (0 is the axial one).
    pub sin_ratios: Vec<f64>,
    /// (|x' − z'|, |x₃|) placements outside the critical cone.
    pub supercritical: Vec<[f64; 2]>,
    pub supercritical_taus: Vec<f64>,
    pub rel_tol: f64,
}

impl Default for GreenSection {
    fn default() -> Self {
        Self {
            taus: vec![20.0, 40.0, 80.0, 160.0],
            depth: 0.8,
            height: 0.6,
            sin_ratios: vec![0.0, 0.5, 0.9],
            supercritical: vec![[1.5, 0.6], [1.0, 0.4], [2.5, 1.0]],
            supercritical_taus: vec![10.0, 20.0, 40.0, 80.0, 160.0, 320.0],
            rel_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergySection {
    /// τ values of −(1/τ) ln ∫_D |∇v|²; empty disables the table.
    pub taus: Vec<f64>,
    pub quadrature: EnergyOptions,
}

impl Default for EnergySection {
    fn default() -> Self {
        Self { taus: Vec::new(), quadrature: EnergyOptions::default() }
    }
}

/// Parsed experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub medium: MediumSpec,
    pub source: SourceSpec,
    #[serde(default, rename = "inclusion")]
    pub inclusions: Vec<InclusionSpec>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub indicator: IndicatorSection,
    #[serde(default)]
    pub tau_ladder: LadderSection,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub region: Option<RegionGrid>,
    #[serde(default)]
    pub optics: OpticsSection,
    #[serde(default)]
    pub green: GreenSection,
    #[serde(default)]
    pub energy: EnergySection,
}

/// Named pass/fail outcome. Informational checks are reported but do not
/// gate `--check`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub required: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, required: true, detail: detail.into() }
    }

    fn note(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { required: false, ..Self::new(name, passed, detail) }
    }
}

pub fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed || !c.required)
}

/// A validated config together with its hash.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: String,
}

fn config_hash(c: &ExperimentConfig) -> Result<String> {
    let json = serde_json::to_vec(c)?;
    Ok(Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect())
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.source.validate()?;
        for inc in &config.inclusions {
            inc.validate(&config.medium)?;
        }
        config.tau_ladder.validate()?;
        if let Some(r) = &config.region {
            r.validate()?;
        }
        let hash = config_hash(&config)?;
        Ok(Self { config, hash })
    }

    /// Parses a TOML config; parse errors carry line and column.
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::new(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// The same experiment with another seed (and hence another hash).
    pub fn with_seed(mut self, seed: u64) -> Result<Self> {
        self.config.seed = seed;
        self.hash = config_hash(&self.config)?;
        Ok(self)
    }

    /// The same experiment with another grid spacing.
    pub fn with_spacing(mut self, spacing: f64) -> Result<Self> {
        self.config.grid.spacing = spacing;
        self.hash = config_hash(&self.config)?;
        Ok(self)
    }

    /// l(D_k, B) for every inclusion.
    pub fn references(&self) -> Result<Vec<SetDistance>> {
        let c = &self.config;
        c.inclusions.iter().map(|inc| geometry::optical_distance_sets(&inc.shape, &c.source.ball, &c.medium)).collect()
    }

    pub fn duration(&self, refs: &[SetDistance]) -> Result<f64> {
        let s = &self.config.simulation;
        match s.duration {
            Some(t) => Ok(t),
            None => {
                let l = refs.iter().map(|r| r.l).fold(f64::NAN, f64::max);
                if l.is_nan() {
                    return Err(Error::Config("simulation.duration is required without inclusions".into()));
                }
                Ok(s.duration_factor * 2.0 * l)
            }
        }
    }

    /// Solver config; region transforms are requested on the ladder when
    /// bounds are enabled.
    pub fn run_config(&self, refs: &[SetDistance]) -> Result<RunConfig> {
        let c = &self.config;
        let duration = self.duration(refs)?;
        let mut rc = RunConfig::new(c.medium, c.source, c.grid, duration);
        rc.inclusions = c.inclusions.clone();
        rc.node_traces = c.simulation.node_traces;
        if c.indicator.bounds && !c.inclusions.is_empty() {
            let grid = wave::plan(&rc)?;
            rc.region_laplace = Some(RegionLaplaceSpec { horizon: duration, taus: c.tau_ladder.taus(&grid, &c.medium) });
        }
        Ok(rc)
    }

    pub fn simulate(&self) -> Result<Simulation> {
        let references = self.references()?;
        let rc = self.run_config(&references)?;
        let runs = wave::run(&rc)?;
        let grid = runs[0].grid;
        let ladder = self.config.tau_ladder.taus(&grid, &self.config.medium);
        Ok(Simulation { hash: self.hash.clone(), references, grid, ladder, runs })
    }

    fn horizon(&self, factor: Option<f64>, l: f64, grid: &GridInfo) -> f64 {
        match factor {
            Some(f) => grid.time(grid.steps_for(f * 2.0 * l)),
            None => grid.time(grid.steps),
        }
    }

    pub fn indicator(&self, sim: &Simulation) -> Result<IndicatorStage> {
        let c = &self.config;
        let opts = IndicatorOptions { background_horizon: c.indicator.background_horizon };
        let bg = &sim.runs[0];
        let mut curves = Vec::new();
        let mut checks = Vec::new();
        for (k, reference) in sim.references.iter().enumerate() {
            let pert = &sim.runs[k + 1];
            let t_fit = self.horizon(c.indicator.horizon_factor, reference.l, &sim.grid);
            let fit = IndicatorCurve::build(pert, bg, &sim.ladder, t_fit, &opts, &self.hash, Some(reference.l))?;
            let sandwich = indicator::sandwich_slack(&fit);
            if c.indicator.bounds {
                checks.push(Check::new(
                    format!("inclusion{k}: sandwich slack rate ≥ T"),
                    sandwich.holds(t_fit),
                    format!(
                        "{} of {} rows violate, fitted rate {}, T = {t_fit:.4}",
                        sandwich.violations.len(),
                        sandwich.checked,
                        sandwich.rate.map_or("none".to_string(), |r| format!("{r:.4}"))
                    ),
                ));
            }
            if t_fit > 2.0 * reference.l {
                checks.push(Check::new(
                    format!("inclusion{k}: e^(τT)|I| increasing at T = {t_fit:.4}"),
                    indicator::scaled_increasing(&fit, c.fit.window),
                    format!("top {} of the ladder", c.fit.window),
                ));
            }
            let mut monitors = Vec::new();
            for &f in &c.indicator.monitor_factors {
                let t = self.horizon(Some(f), reference.l, &sim.grid);
                let m_opts = IndicatorOptions { background_horizon: None };
                let curve = IndicatorCurve::build(pert, bg, &sim.ladder, t, &m_opts, &self.hash, Some(reference.l))?;
                if t < 2.0 * reference.l {
                    let ok = indicator::scaled_decreasing(&curve, c.indicator.monitor_fraction);
                    checks.push(Check::new(
                        format!("inclusion{k}: e^(τT)|I| decreasing at T = {t:.4}"),
                        ok,
                        format!("top {} of the ladder", c.indicator.monitor_fraction),
                    ));
                }
                monitors.push(curve);
            }
            curves.push(InclusionCurves { index: k, fit, sandwich, monitors });
        }
        Ok(IndicatorStage { hash: self.hash.clone(), curves, checks })
    }

    pub fn reconstruct(&self, stage: &IndicatorStage) -> Result<ReconstructionStage> {
        let c = &self.config;
        let mut reports = Vec::new();
        let mut checks = Vec::new();
        for ic in &stage.curves {
            let curve = &ic.fit;
            if curve.meta.config_hash != self.hash {
                return Err(Error::RunMismatch(format!("curve hash {} does not match config {}", curve.meta.config_hash, self.hash)));
            }
            let inc = &c.inclusions[ic.index];
            let k = ic.index;
            let fit = reconstruction::decay_rate_fit(curve, &c.fit);
            let narrow = FitOptions { window: 0.75 * c.fit.window, ..c.fit };
            let refit = reconstruction::decay_rate_fit(curve, &narrow).ok();
            let contrast = reconstruction::classify_contrast(curve, c.fit.window);
            checks.push(Check::new(
                format!("inclusion{k}: contrast class"),
                contrast.matches(inc.sign_class),
                format!("classified {contrast:?}, configured {:?}", inc.sign_class),
            ));
            let mut region = None;
            match &fit {
                Ok(f) => {
                    if let Some(l) = f.l_db_reference {
                        let err = (f.l_hat - l).abs() / l;
                        checks.push(Check::new(
                            format!("inclusion{k}: l_hat within {L_HAT_TOLERANCE} of l(D,B)"),
                            err < L_HAT_TOLERANCE,
                            format!("l_hat = {:.6}, reference {l:.6}, relative error {err:.4}", f.l_hat),
                        ));
                    }
                    if let Some(r) = &refit {
                        let shift = (r.l_hat - f.l_hat).abs();
                        checks.push(Check::note(
                            format!("inclusion{k}: narrow-window refit within 2 stderr"),
                            shift < 2.0 * f.stderr,
                            format!("l_hat {:.6} vs {:.6}, stderr {:.6}", r.l_hat, f.l_hat, f.stderr),
                        ));
                    }
                    checks.push(Check::new(
                        format!("inclusion{k}: T > 2 l_hat"),
                        !f.regime_violation,
                        format!("T = {}, l_hat = {:.6}", f.horizon, f.l_hat),
                    ));
                    if let Some(g) = &c.region {
                        let mask = reconstruction::emit_region(f.l_hat, &c.source.ball, &c.medium, g, Some(&inc.shape))?;
                        if let Some(cn) = mask.containment {
                            checks.push(Check::note(
                                format!("inclusion{k}: D inside the region estimate"),
                                cn.holds(),
                                format!("{} of {} sampled points", cn.members, cn.sampled),
                            ));
                        }
                        region = Some(mask);
                    }
                }
                Err(e) => checks.push(Check::new(format!("inclusion{k}: decay-rate fit"), false, e.to_string())),
            }
            reports.push(InclusionReport { index: k, sign_class: inc.sign_class, fit: fit.ok(), refit, contrast, region });
        }
        Ok(ReconstructionStage { hash: self.hash.clone(), reports, checks })
    }

    pub fn optics(&self) -> Result<OpticsReport> {
        optics_report(self)
    }

    pub fn green(&self) -> Result<GreenReport> {
        green_report(self)
    }

    /// Gradient-energy rates of the first inclusion's shape.
    pub fn energy(&self) -> Result<Option<EnergyReport>> {
        let c = &self.config;
        let Some(inc) = c.inclusions.first() else { return Ok(None) };
        if c.energy.taus.is_empty() {
            return Ok(None);
        }
        let l = geometry::optical_distance_sets(&inc.shape, &c.source.ball, &c.medium)?.l;
        energy_report(&inc.shape, &c.source, &c.medium, l, &c.energy, &self.hash).map(Some)
    }
}

/// Output of [`Experiment::simulate`].
#[derive(Debug, Clone)]
pub struct Simulation {
    pub hash: String,
    pub references: Vec<SetDistance>,
    pub grid: GridInfo,
    pub ladder: Vec<f64>,
    /// Background run first, then one scattered run per inclusion.
    pub runs: Vec<WaveRun>,
}

#[derive(Serialize)]
struct SimulationManifest<'a> {
    config_hash: &'a str,
    grid: &'a GridInfo,
    ladder: &'a [f64],
    l_db: Vec<f64>,
    runs: Vec<String>,
}

impl Simulation {
    fn run_stem(k: usize) -> String {
        if k == 0 {
            "run_background".into()
        } else {
            format!("run_inclusion{}", k - 1)
        }
    }

    /// Trace files, summary CSVs and `simulation.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut stems = Vec::new();
        for (k, r) in self.runs.iter().enumerate() {
            let stem = Self::run_stem(k);
            TraceFile::from(r).write(&dir.join(format!("{stem}.trc")))?;
            wave::write_summary_csv(r, &self.hash, &dir.join(format!("{stem}.csv")))?;
            stems.push(stem);
        }
        let manifest = SimulationManifest {
            config_hash: &self.hash,
            grid: &self.grid,
            ladder: &self.ladder,
            l_db: self.references.iter().map(|r| r.l).collect(),
            runs: stems,
        };
        std::fs::write(dir.join("simulation.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

/// Curves of one inclusion.
#[derive(Debug, Clone)]
pub struct InclusionCurves {
    pub index: usize,
    pub fit: IndicatorCurve,
    pub sandwich: SandwichFit,
    pub monitors: Vec<IndicatorCurve>,
}

#[derive(Debug, Clone)]
pub struct IndicatorStage {
    pub hash: String,
    pub curves: Vec<InclusionCurves>,
    pub checks: Vec<Check>,
}

#[derive(Serialize, Deserialize)]
struct StageSummary {
    config_hash: String,
    checks: Vec<Check>,
}

impl IndicatorStage {
    pub fn fit_stem(k: usize) -> String {
        format!("curve_inclusion{k}")
    }

    /// `curve_inclusion<k>.{csv,json}`, monitors as `..._monitor<j>`, the
    /// sandwich fits and `indicator.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join("sandwich.csv"))?;
        w.write_record(["config_hash", "inclusion", "tau", "violation"])?;
        for ic in &self.curves {
            ic.fit.write(dir, &Self::fit_stem(ic.index))?;
            for (j, m) in ic.monitors.iter().enumerate() {
                m.write(dir, &format!("{}_monitor{j}", Self::fit_stem(ic.index)))?;
            }
            for (t, v) in &ic.sandwich.violations {
                w.write_record([self.hash.clone(), ic.index.to_string(), t.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        let s = StageSummary { config_hash: self.hash.clone(), checks: self.checks.clone() };
        std::fs::write(dir.join("indicator.json"), serde_json::to_string_pretty(&s)? + "\n")?;
        Ok(())
    }

    /// Reads the fitted curves written by [`write`](Self::write) for `count`
    /// inclusions; every file must carry `hash`.
    pub fn read_fit_curves(dir: &Path, count: usize, hash: &str) -> Result<Vec<IndicatorCurve>> {
        (0..count)
            .map(|k| {
                let c = IndicatorCurve::read(dir, &Self::fit_stem(k))?;
                if c.meta.config_hash != hash {
                    return Err(Error::RunMismatch(format!("{} was written by config {}", Self::fit_stem(k), c.meta.config_hash)));
                }
                Ok(c)
            })
            .collect()
    }
}

/// Inversion results of one inclusion.
#[derive(Debug, Clone)]
pub struct InclusionReport {
    pub index: usize,
    pub sign_class: wave::SignClass,
    pub fit: Option<FitReport>,
    /// Fit on the narrower window (¾ of the configured one).
    pub refit: Option<FitReport>,
    pub contrast: Contrast,
    pub region: Option<RegionMask>,
}

#[derive(Debug, Clone)]
pub struct ReconstructionStage {
    pub hash: String,
    pub reports: Vec<InclusionReport>,
    pub checks: Vec<Check>,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    config_hash: &'a str,
    inclusion: usize,
    sign_class: wave::SignClass,
    contrast: Contrast,
    fit: &'a Option<FitReport>,
    refit: &'a Option<FitReport>,
    region_members: Option<usize>,
}

impl ReconstructionStage {
    /// `fit_inclusion<k>.json`, `region_inclusion<k>.{bin,csv}` and
    /// `reconstruction.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for r in &self.reports {
            let j = ReportJson {
                config_hash: &self.hash,
                inclusion: r.index,
                sign_class: r.sign_class,
                contrast: r.contrast,
                fit: &r.fit,
                refit: &r.refit,
                region_members: r.region.as_ref().map(|m| m.count()),
            };
            std::fs::write(dir.join(format!("fit_inclusion{}.json", r.index)), serde_json::to_string_pretty(&j)? + "\n")?;
            if let Some(m) = &r.region {
                m.write(dir, &format!("region_inclusion{}", r.index), &self.hash)?;
            }
        }
        let s = StageSummary { config_hash: self.hash.clone(), checks: self.checks.clone() };
        std::fs::write(dir.join("reconstruction.json"), serde_json::to_string_pretty(&s)? + "\n")?;
        Ok(())
    }
}

/// Curves rebuilt from files into a stage for [`Experiment::reconstruct`].
pub fn stage_from_curves(hash: &str, curves: Vec<IndicatorCurve>) -> IndicatorStage {
    let curves = curves
        .into_iter()
        .enumerate()
        .map(|(index, fit)| {
            let sandwich = indicator::sandwich_slack(&fit);
            InclusionCurves { index, fit, sandwich, monitors: Vec::new() }
        })
        .collect();
    IndicatorStage { hash: hash.to_string(), curves, checks: Vec::new() }
}

// ---------------------------------------------------------------------------
// Optics scans

/// Minimum of the travel time on an n×n grid over the box spanned by x' and
/// y' with a 0.05 margin; returns (minimum, grid spacing).
pub fn fermat_grid_min(x: &Point3, y: &Point3, m: &MediumSpec, n: usize) -> Result<(f64, f64)> {
    let lo = Vector2::new(x.x.min(y.x), x.y.min(y.y)).add_scalar(-0.05);
    let hi = Vector2::new(x.x.max(y.x), x.y.max(y.y)).add_scalar(0.05);
    let step = (hi - lo).max() / (n - 1) as f64;
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in 0..n {
            let z = lo + Vector2::new(i as f64, j as f64) * step;
            best = best.min(geometry::path_time(x, y, &z, m)?);
        }
    }
    Ok((best, step))
}

fn random_medium(rng: &mut ChaCha8Rng) -> Result<MediumSpec> {
    let gm = rng.gen_range(0.3..3.0);
    MediumSpec::new(gm * rng.gen_range(1.0..6.0), gm)
}

fn random_lower(rng: &mut ChaCha8Rng) -> Point3 {
    Point3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), -rng.gen_range(0.2..3.0))
}

fn random_upper(rng: &mut ChaCha8Rng) -> Point3 {
    Point3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(0.2..3.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetDistanceRow {
    pub inclusion: usize,
    pub l: f64,
    pub x_star: [f64; 3],
    pub y_star: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpticsReport {
    pub config_hash: String,
    pub set_distances: Vec<SetDistanceRow>,
    pub fermat_samples: usize,
    pub fermat_passed: usize,
    pub max_snell_residual: f64,
    /// Largest (grid minimum − l) relative to the second-order bound.
    pub max_gap_ratio: f64,
    pub modified_samples: usize,
    pub modified_violations: usize,
    pub localization_samples: usize,
    pub localization_passed: usize,
    pub checks: Vec<Check>,
}

fn optics_report(e: &Experiment) -> Result<OpticsReport> {
    let c = &e.config;
    let o = &c.optics;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let set_distances = e
        .references()?
        .iter()
        .enumerate()
        .map(|(k, r)| SetDistanceRow { inclusion: k, l: r.l, x_star: r.x_star.into(), y_star: r.y_star.into() })
        .collect();

    let mut fermat_passed = 0;
    let mut max_snell_residual: f64 = 0.0;
    let mut max_gap_ratio: f64 = 0.0;
    for _ in 0..o.fermat_samples {
        let m = random_medium(&mut rng)?;
        let (x, y) = (random_lower(&mut rng), random_upper(&mut rng));
        let s = geometry::snell_point(&x, &y, &m)?;
        let (gmin, step) = fermat_grid_min(&x, &y, &m, o.fermat_grid)?;
        // Nearest grid node lies within step/√2 of z'.
        let lmax = nalgebra::SymmetricEigen::new(s.hessian).eigenvalues.max();
        let bound = 0.25 * lmax * step * step * 1.05 + 1e-12 * s.l_value;
        let gap = gmin - s.l_value;
        let res = s.snell_residual(&m);
        max_snell_residual = max_snell_residual.max(res);
        max_gap_ratio = max_gap_ratio.max(gap / bound);
        if gap >= -1e-12 * s.l_value && gap <= bound && res < SNELL_RESIDUAL_MAX {
            fermat_passed += 1;
        }
    }

    let mut modified_violations = 0;
    for _ in 0..o.modified_samples {
        let m = random_medium(&mut rng)?;
        let (x, y) = (random_lower(&mut rng), random_upper(&mut rng));
        let l = geometry::optical_distance(&x, &y, &m)?;
        let r = 5.0 * rng.gen::<f64>().sqrt();
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let z = geometry::horizontal(&x) + Vector2::new(phi.cos(), phi.sin()) * r;
        if geometry::modified_path(&x, &y, &z, &m)? < l - MODIFIED_PATH_MARGIN * l.max(1.0) {
            modified_violations += 1;
        }
    }

    let mut localization_passed = 0;
    for _ in 0..o.localization_samples {
        let m = random_medium(&mut rng)?;
        let (x, y) = (random_lower(&mut rng), random_upper(&mut rng));
        let s = geometry::snell_point(&x, &y, &m)?;
        let n = o.localization_grid;
        let step = 2.0 / (n - 1) as f64;
        let mut best = (f64::INFINITY, Vector2::zeros());
        for i in 0..n {
            for j in 0..n {
                let z = s.z_prime + Vector2::new(i as f64 * step - 1.0, j as f64 * step - 1.0);
                let v = geometry::modified_path(&x, &y, &z, &m)?;
                if v < best.0 {
                    best = (v, z);
                }
            }
        }
        if (best.1 - s.z_prime).amax() <= step {
            localization_passed += 1;
        }
    }

    let checks = vec![
        Check::new(
            "Fermat oracle",
            fermat_passed == o.fermat_samples,
            format!("{fermat_passed}/{} within the grid bound, max residual {max_snell_residual:.3e}", o.fermat_samples),
        ),
        Check::new(
            "modified path ≥ l(x,y)",
            modified_violations == 0,
            format!("{modified_violations} violations in {} triples", o.modified_samples),
        ),
        Check::new(
            "modified-path minimizer at z'(x,y)",
            localization_passed == o.localization_samples,
            format!("{localization_passed}/{} within one cell", o.localization_samples),
        ),
    ];
    Ok(OpticsReport {
        config_hash: e.hash.clone(),
        set_distances,
        fermat_samples: o.fermat_samples,
        fermat_passed,
        max_snell_residual,
        max_gap_ratio,
        modified_samples: o.modified_samples,
        modified_violations,
        localization_samples: o.localization_samples,
        localization_passed,
        checks,
    })
}

impl OpticsReport {
    /// `optics_distances.csv` and `optics.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join("optics_distances.csv"))?;
        w.write_record(["config_hash", "inclusion", "l", "x1", "x2", "x3", "y1", "y2", "y3"])?;
        for r in &self.set_distances {
            let mut rec = vec![self.config_hash.clone(), r.inclusion.to_string(), r.l.to_string()];
            rec.extend(r.x_star.iter().chain(&r.y_star).map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        std::fs::write(dir.join("optics.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Kernel tables

/// x below and y above the interface with refraction angle sin θ₋ =
/// `sin_ratio`·a₀ in the x1–x3 plane.
pub fn snell_pair(m: &MediumSpec, depth: f64, height: f64, sin_ratio: f64) -> Result<(Point3, Point3)> {
    let s_minus = sin_ratio * m.a0;
    let s_plus = s_minus * (m.gamma_plus / m.gamma_minus).sqrt();
    if !(0.0..1.0).contains(&s_minus) || !(s_plus < 1.0) {
        return Err(Error::Config(format!("sin ratio {sin_ratio} has no refracted ray")));
    }
    let z = depth * s_minus / (1.0 - s_minus * s_minus).sqrt();
    let y1 = z + height * s_plus / (1.0 - s_plus * s_plus).sqrt();
    Ok((Point3::new(0.0, 0.0, -depth), Point3::new(y1, 0.0, height)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub geometry: usize,
    pub sin_ratio: f64,
    pub tau: f64,
    /// Φ_τ / leading asymptotics.
    pub ratio: f64,
    /// |unit ∇Φ_τ − unit ∇(asymptotics)|.
    pub direction_error: f64,
    pub error_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRow {
    pub geometry: String,
    pub x: [f64; 3],
    pub y: [f64; 3],
    pub tau: f64,
    /// Values below are scaled by e^{−log_scale}.
    pub log_scale: f64,
    pub phi: f64,
    pub grad: [f64; 3],
    pub error_estimate: f64,
    pub phi_smooth: f64,
    pub phi_branch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupercriticalRow {
    pub rho: f64,
    pub depth: f64,
    pub rate: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreenReport {
    pub config_hash: String,
    pub ratios: Vec<RatioRow>,
    /// Fitted exponents of |ratio − 1| and of the direction error in 1/τ.
    pub exponents: Vec<[f64; 2]>,
    pub supercritical: Vec<SupercriticalRow>,
    /// Relative error of the homogeneous-mode kernel against the free kernel.
    pub homogeneous_error: f64,
    pub kernel: Vec<KernelRow>,
    pub checks: Vec<Check>,
}

/// Slope of ln y against ln x.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    linear_slope(&lx, &ly)
}

fn linear_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn kernel_row(name: &str, x: &Point3, y: &Point3, tau: f64, k: &green::KernelValue) -> KernelRow {
    KernelRow {
        geometry: name.to_string(),
        x: (*x).into(),
        y: (*y).into(),
        tau,
        log_scale: k.log_scale,
        phi: k.phi,
        grad: k.grad.into(),
        error_estimate: k.error_estimate,
        phi_smooth: k.phi_smooth,
        phi_branch: k.phi_branch,
    }
}

fn green_report(e: &Experiment) -> Result<GreenReport> {
    let c = &e.config;
    let g = &c.green;
    let m = &c.medium;
    let opts = KernelOptions { rel_tol: g.rel_tol, ..Default::default() };
    let mut ratios = Vec::new();
    let mut exponents = Vec::new();
    let mut kernel = Vec::new();
    let mut checks = Vec::new();
    for (gi, &sr) in g.sin_ratios.iter().enumerate() {
        let (x, y) = snell_pair(m, g.depth, g.height, sr)?;
        let mut errs = Vec::new();
        let mut dirs = Vec::new();
        for &tau in &g.taus {
            let k = green::phi_tau(&x, &y, tau, m, &opts)?;
            let a = green::phi_tau_asymptotic(&x, &y, tau, m)?;
            let ratio = k.phi / a.phi * (k.log_scale - a.log_scale).exp();
            let direction_error = (k.grad.normalize() - a.grad.normalize()).norm();
            errs.push((ratio - 1.0).abs());
            dirs.push(direction_error);
            ratios.push(RatioRow { geometry: gi, sin_ratio: sr, tau, ratio, direction_error, error_estimate: k.error_estimate });
            kernel.push(kernel_row(&format!("sin_ratio={sr}"), &x, &y, tau, &k));
        }
        if g.taus.len() >= 2 {
            // Errors at round-off level (the axial direction) count as exact.
            let exponent = |v: &[f64]| if v.iter().all(|e| *e < 1e-12) { f64::INFINITY } else { -log_log_slope(&g.taus, v) };
            let ex = [exponent(&errs), exponent(&dirs)];
            let last = errs[errs.len() - 1];
            checks.push(Check::new(
                format!("geometry {gi} (sin θ₋ = {sr}·a₀): ratio → 1"),
                ex[0] >= RATIO_EXPONENT_MIN && last < RATIO_ERROR_MAX,
                format!("exponent {:.3}, |ratio − 1| = {last:.3e} at τ = {}", ex[0], g.taus[g.taus.len() - 1]),
            ));
            checks.push(Check::new(
                format!("geometry {gi} (sin θ₋ = {sr}·a₀): gradient direction"),
                ex[1] >= RATIO_EXPONENT_MIN && dirs[dirs.len() - 1] < RATIO_ERROR_MAX,
                format!("exponent {:.3}, error {:.3e}", ex[1], dirs[dirs.len() - 1]),
            ));
            exponents.push(ex);
        }
    }

    let mut supercritical = Vec::new();
    for &[rho, depth] in &g.supercritical {
        let x = Point3::new(0.0, 0.0, -depth);
        let z = Vector2::new(rho, 0.0);
        let bound = geometry::travel_bound(&x, &z, m.theta0, m)?;
        let logs = g
            .supercritical_taus
            .iter()
            .map(|&t| Ok(green::refracted_part(&x, &z, t, m, &opts)?.log_abs()))
            .collect::<Result<Vec<f64>>>()?;
        let rate = -linear_slope(&g.supercritical_taus, &logs);
        checks.push(Check::new(
            format!("supercritical ρ = {rho}, |x₃| = {depth}: rate ≥ {SUPERCRITICAL_RATE_FRACTION}·T(θ₀)"),
            rate >= SUPERCRITICAL_RATE_FRACTION * bound,
            format!("rate {rate:.6}, T(θ₀) = {bound:.6}"),
        ));
        supercritical.push(SupercriticalRow { rho, depth, rate, bound });
    }

    let mh = MediumSpec::homogeneous(m.gamma_minus)?;
    let (x, y) = (Point3::new(0.1, -0.2, -g.depth), Point3::new(-0.3, 0.4, g.height));
    let tau = g.taus.first().copied().unwrap_or(20.0);
    let k = green::phi_tau(&x, &y, tau, &mh, &opts)?;
    let r = (x - y).norm();
    let exact_ln = -tau * r / mh.gamma_minus.sqrt() - (4.0 * std::f64::consts::PI * mh.gamma_minus * r).ln();
    let homogeneous_error = (k.phi.ln() + k.log_scale - exact_ln).exp() - 1.0;
    kernel.push(kernel_row("homogeneous", &x, &y, tau, &k));
    checks.push(Check::new(
        "homogeneous mode: free kernel",
        homogeneous_error.abs() < 1e-6,
        format!("relative error {homogeneous_error:.3e}"),
    ));

    Ok(GreenReport { config_hash: e.hash.clone(), ratios, exponents, supercritical, homogeneous_error, kernel, checks })
}

impl GreenReport {
    /// `green_ratio.csv`, `green_kernel.csv`, `green_supercritical.csv` and
    /// `green.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let h = &self.config_hash;
        let mut w = csv::Writer::from_path(dir.join("green_ratio.csv"))?;
        w.write_record(["config_hash", "geometry", "sin_ratio", "tau", "ratio", "direction_error", "error_estimate"])?;
        for r in &self.ratios {
            w.write_record([
                h.clone(),
                r.geometry.to_string(),
                r.sin_ratio.to_string(),
                r.tau.to_string(),
                r.ratio.to_string(),
                r.direction_error.to_string(),
                r.error_estimate.to_string(),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("green_kernel.csv"))?;
        w.write_record([
            "config_hash", "geometry", "x1", "x2", "x3", "y1", "y2", "y3", "tau", "log_scale", "phi", "grad1", "grad2", "grad3",
            "error_estimate", "phi_smooth", "phi_branch",
        ])?;
        for r in &self.kernel {
            let mut rec = vec![h.clone(), r.geometry.clone()];
            rec.extend(r.x.iter().chain(&r.y).map(|v| v.to_string()));
            rec.extend([r.tau, r.log_scale, r.phi].iter().chain(&r.grad).map(|v| v.to_string()));
            rec.extend([r.error_estimate, r.phi_smooth, r.phi_branch].iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("green_supercritical.csv"))?;
        w.write_record(["config_hash", "rho", "depth", "rate", "bound"])?;
        for r in &self.supercritical {
            w.write_record([h.clone(), r.rho.to_string(), r.depth.to_string(), r.rate.to_string(), r.bound.to_string()])?;
        }
        w.flush()?;
        let s = StageSummary { config_hash: h.clone(), checks: self.checks.clone() };
        std::fs::write(dir.join("green.json"), serde_json::to_string_pretty(&s)? + "\n")?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gradient energy

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub tau: f64,
    pub rate: f64,
    pub lower: f64,
    pub upper: f64,
    pub table_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub config_hash: String,
    pub l_db: f64,
    pub rows: Vec<EnergyRow>,
    /// L in rate(τ) ≈ L + a·ln τ/τ + b/τ, when three or more τ are given.
    pub limit: Option<f64>,
    pub checks: Vec<Check>,
}

/// Band [2l − 2 ln τ/τ − s, 2l + 4 ln τ/τ + s] with s = 0.05·2l.
pub fn energy_band(l: f64, tau: f64) -> (f64, f64) {
    let s = ENERGY_SLACK_FRACTION * 2.0 * l;
    let lt = tau.ln() / tau;
    (2.0 * l - 2.0 * lt - s, 2.0 * l + 4.0 * lt + s)
}

/// Least-squares L in rate(τ) = L + a·ln τ/τ + b/τ.
pub fn extrapolate_rate(taus: &[f64], rates: &[f64]) -> Result<f64> {
    if taus.len() < 3 {
        return Err(Error::InsufficientData("extrapolation needs three τ values".into()));
    }
    let a = DMatrix::from_fn(taus.len(), 3, |i, j| match j {
        0 => 1.0,
        1 => taus[i].ln() / taus[i],
        _ => 1.0 / taus[i],
    });
    let y = DVector::from_column_slice(rates);
    let coef = a
        .svd(true, true)
        .solve(&y, 1e-14)
        .map_err(|e| Error::InsufficientData(e.to_string()))?;
    Ok(coef[0])
}

pub fn energy_report(d: &Shape, source: &SourceSpec, m: &MediumSpec, l: f64, s: &EnergySection, hash: &str) -> Result<EnergyReport> {
    let energies = s
        .taus
        .iter()
        .map(|&t| indicator::gradient_energy(d, source, m, t, &s.quadrature))
        .collect::<Result<Vec<GradientEnergy>>>()?;
    let mut checks = Vec::new();
    let rows: Vec<EnergyRow> = energies
        .iter()
        .map(|g| {
            let (lower, upper) = energy_band(l, g.tau);
            EnergyRow { tau: g.tau, rate: g.rate, lower, upper, table_error: g.table_error }
        })
        .collect();
    for r in &rows {
        checks.push(Check::new(
            format!("energy rate in band at τ = {}", r.tau),
            r.rate >= r.lower && r.rate <= r.upper,
            format!("{:.6} in [{:.6}, {:.6}]", r.rate, r.lower, r.upper),
        ));
    }
    let limit = extrapolate_rate(&s.taus, &rows.iter().map(|r| r.rate).collect::<Vec<_>>()).ok();
    if let Some(lim) = limit {
        let err = (lim - 2.0 * l).abs() / (2.0 * l);
        checks.push(Check::new(
            "extrapolated energy rate → 2l(D,B)",
            err < ENERGY_LIMIT_TOLERANCE,
            format!("limit {lim:.6}, 2l = {:.6}, relative error {err:.4}", 2.0 * l),
        ));
    }
    Ok(EnergyReport { config_hash: hash.to_string(), l_db: l, rows, limit, checks })
}

impl EnergyReport {
    /// `energy.csv` and `energy.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join("energy.csv"))?;
        w.write_record(["config_hash", "tau", "rate", "lower", "upper", "table_error"])?;
        for r in &self.rows {
            w.write_record([
                self.config_hash.clone(),
                r.tau.to_string(),
                r.rate.to_string(),
                r.lower.to_string(),
                r.upper.to_string(),
                r.table_error.to_string(),
            ])?;
        }
        w.flush()?;
        std::fs::write(dir.join("energy.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
