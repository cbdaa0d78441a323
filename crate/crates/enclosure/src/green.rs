//! The two-layer kernel Φ_τ(x, y) for x below and y above the interface.
//!
//! Φ_τ is assembled from the refracted part E_τ(x, z') (the lower-layer
//! factor) and the free upper-layer kernel:
//!
//! Φ_τ(x, y) = τ/(4πγ₊) ∫ E_τ(x, z') e^{−τ|z̃'−y|/√γ₊}/|z̃'−y| dz'.
//!
//! E_τ is evaluated on the steepest-descent contour ζ₁(σ₁) = i√(1+σ₁²) sin θ
//! + σ₁ cos θ, which turns the spectral integral into a Laplace-type
//! integral with exponent −τ̃|x − z̃'| f(σ), plus, beyond the critical angle,
//! a branch-cut integral along ζ₁ = i w, w ∈ [b₀(ζ₂), sin θ].
//!
//! All values are returned scaled by an explicit exponential factor so that
//! large τ does not underflow: `true value = scaled · exp(log_scale)`.

use std::cell::Cell;
use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geometry::{self, horizontal, lift, MediumSpec};
use crate::quadrature::{integrate, AdaptiveOptions, Estimate, Vals};
use crate::shapes::BallSpec;
use crate::Point3;

/// Exponent range kept by all truncations: e^{-46} ≈ 1e-20.
const CUTOFF: f64 = 46.0;

/// Accuracy controls for kernel evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelOptions {
    /// Relative tolerance of the outermost integral.
    pub rel_tol: f64,
    /// Smallest admissible Laplace parameter.
    pub tau_min: f64,
    /// Panel budget per adaptive integral.
    pub max_intervals: usize,
    /// Also integrate the mirrored half σ₁ < 0 and report the imaginary residue.
    pub check_reality: bool,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self { rel_tol: 1e-8, tau_min: 5.0, max_intervals: 300, check_reality: false }
    }
}

impl KernelOptions {
    fn adaptive(&self, rel_tol: f64, abs_tol: f64) -> AdaptiveOptions {
        AdaptiveOptions { rel_tol, abs_tol, max_intervals: self.max_intervals }
    }
}

fn checked<V>(est: Estimate<V>, what: &str, requested: f64) -> Result<Estimate<V>> {
    if est.converged {
        Ok(est)
    } else {
        Err(Error::Quadrature { what: what.to_string(), achieved: est.error, requested, evaluations: est.evaluations })
    }
}

/// Transmission coefficient R(ρ).
pub fn transmission_coeff(rho: f64, m: &MediumSpec) -> f64 {
    let a2 = m.a0 * m.a0;
    let s = (a2 + rho * rho).sqrt();
    let t = (1.0 + rho * rho).sqrt();
    4.0 * m.gamma_minus.sqrt() * s * t / (s + a2 * t)
}

/// Branch point b₀(ζ₂) = √((a₀² + ζ₂²)/(1 + ζ₂²)).
pub fn b0(zeta2: f64, m: &MediumSpec) -> f64 {
    ((m.a0 * m.a0 + zeta2 * zeta2) / (1.0 + zeta2 * zeta2)).sqrt()
}

/// Q-functions at a spectral point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QValues {
    pub p: Complex64,
    pub q0: Complex64,
    pub q0_tilde: Complex64,
    /// Q₁ = Q₂ = iζ₁Q̃₀.
    pub q1: Complex64,
    pub q3: Complex64,
}

fn q_from_parts(root1: Complex64, p: Complex64, zeta1: Complex64, s2: f64, m: &MediumSpec) -> QValues {
    let q0 = root1 * p * (4.0 * m.gamma_minus.sqrt() * s2) / (p + root1 * (m.a0 * m.a0));
    let q0_tilde = q0 * s2;
    QValues { p, q0, q0_tilde, q1: Complex64::i() * zeta1 * q0_tilde, q3: -root1 * q0_tilde }
}

/// Q₀, Q̃₀, Q₁ = Q₂ and Q₃ with P = √(b₀² + ζ₁²) on the principal branch.
pub fn q_functions(zeta1: Complex64, zeta2: f64, m: &MediumSpec) -> Result<QValues> {
    let bb = b0(zeta2, m);
    if zeta1.re == 0.0 && zeta1.im.abs() >= bb {
        return domain(format!("ζ₁ = {zeta1} lies on a branch cut (b₀ = {bb})"));
    }
    let z2 = zeta1 * zeta1;
    let root1 = (z2 + 1.0).sqrt();
    let p = (z2 + bb * bb).sqrt();
    Ok(q_from_parts(root1, p, zeta1, (1.0 + zeta2 * zeta2).sqrt(), m))
}

/// Refracted part at one (x, z') pair: E, ∂E/∂|x'−z'| and ∂E/∂|x₃|, split
/// into the steepest-descent (smooth) and branch-cut contributions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefractedPart {
    pub smooth: [f64; 3],
    pub branch: [f64; 3],
    /// true value = scaled value · exp(log_scale).
    pub log_scale: f64,
    pub error_estimate: f64,
    pub evaluations: usize,
    /// |Im ∫| / |∫| of the σ-integral when `check_reality` is set.
    pub imag_residual: Option<f64>,
    /// Whether z' lies outside the critical cone (branch term present).
    pub supercritical: bool,
    /// Unit vector (x' − z')/|x' − z'| (zero when x' = z').
    pub theta_dir: Vector2<f64>,
}

impl RefractedPart {
    pub fn total(&self) -> [f64; 3] {
        [self.smooth[0] + self.branch[0], self.smooth[1] + self.branch[1], self.smooth[2] + self.branch[2]]
    }

    /// E_τ(x, z') without scaling (may underflow for large τ).
    pub fn value(&self) -> f64 {
        self.total()[0] * self.log_scale.exp()
    }

    /// ln |E_τ(x, z')|.
    pub fn log_abs(&self) -> f64 {
        self.total()[0].abs().ln() + self.log_scale
    }

    /// Scaled component k: 0 → E, 1, 2 → ∂E/∂x_k, 3 → ∂E/∂x₃.
    pub fn component(&self, k: usize) -> f64 {
        let t = self.total();
        match k {
            0 => t[0],
            1 => self.theta_dir.x * t[1],
            2 => self.theta_dir.y * t[1],
            3 => -t[2],
            _ => panic!("component index must be 0..=3"),
        }
    }
}

/// Exponent of the dominant decay: |x−z̃'|/√γ₋ inside the critical cone,
/// T_{x,z'}(θ₀) outside.
pub fn effective_time(rho: f64, depth: f64, m: &MediumSpec) -> f64 {
    let r = rho.hypot(depth);
    if m.is_homogeneous() || rho <= m.a0 * r {
        r * m.slowness_minus()
    } else {
        (depth * m.theta0.cos() + rho * m.a0) * m.slowness_minus()
    }
}

/// E_τ(x, z') and its gradient for x ∈ ℝ³₋, z' ∈ ℝ².
pub fn refracted_part(x: &Point3, z: &Vector2<f64>, tau: f64, m: &MediumSpec, opts: &KernelOptions) -> Result<RefractedPart> {
    if !(x.z < 0.0) {
        return domain(format!("field point must satisfy x3 < 0, got x3 = {}", x.z));
    }
    let d = horizontal(x) - z;
    let rho = d.norm();
    let mut part = refracted_radial(rho, -x.z, tau, m, None, opts)?;
    part.theta_dir = if rho > 0.0 { d / rho } else { Vector2::zeros() };
    Ok(part)
}

/// Refracted part as a function of the horizontal offset ρ = |x' − z'| and
/// the depth |x₃|. `log_scale` defaults to −τ·[`effective_time`].
pub fn refracted_radial(
    rho: f64,
    depth: f64,
    tau: f64,
    m: &MediumSpec,
    log_scale: Option<f64>,
    opts: &KernelOptions,
) -> Result<RefractedPart> {
    if !(tau >= opts.tau_min) {
        return domain(format!("τ = {tau} is below τ_min = {}", opts.tau_min));
    }
    if !(depth > 0.0) || !(rho >= 0.0) {
        return domain("refracted part needs depth > 0 and ρ ≥ 0");
    }
    let log_scale = log_scale.unwrap_or(-tau * effective_time(rho, depth, m));
    let shift = -log_scale;
    let r = rho.hypot(depth);
    let sin_t = rho / r;
    let cos_t = depth / r;
    let amp = tau * r * m.slowness_minus();
    let c0 = tau / (2.0 * (2.0 * PI).powi(2) * m.gamma_minus.powf(1.5));
    let c1 = tau * tau / (2.0 * (2.0 * PI).powi(2) * m.gamma_minus * m.gamma_minus);
    let supercritical = !m.is_homogeneous() && sin_t > m.a0;
    let evals = Cell::new(0usize);

    let (branch, branch_err) = if supercritical {
        let est = branch_integral(sin_t, cos_t, amp, shift, m, opts, &evals)?;
        ([c0 * est.value.0[0], c1 * est.value.0[1], c1 * est.value.0[2]], c0 * est.error)
    } else {
        ([0.0; 3], 0.0)
    };

    // Size hint for absolute tolerances of the smooth part: Laplace leading term.
    let q_peak = transmission_coeff(0.0, m).max(1.0);
    let smooth_hint = 2.0 * PI / amp * q_peak * (shift - amp).exp();
    let hint = smooth_hint.max(branch[0].abs() / c0);
    let (smooth_vals, smooth_err, imag) = smooth_integral(sin_t, cos_t, amp, shift, hint, m, opts, &evals)?;
    let smooth = [c0 * smooth_vals[0], c1 * smooth_vals[1], c1 * smooth_vals[2]];
    let imag_residual = imag.map(|im| {
        let mag = smooth_vals[0].abs().max(1e-300);
        im / mag
    });
    let total = (smooth[0] + branch[0]).abs().max(1e-300);
    Ok(RefractedPart {
        smooth,
        branch,
        log_scale,
        error_estimate: (c0 * smooth_err + branch_err) / total,
        evaluations: evals.get(),
        imag_residual,
        supercritical,
        theta_dir: Vector2::zeros(),
    })
}

/// Real parts of F_k(σ) e^{−A f(σ) + shift} for k = 0, 1, 3 at σ₁ ≥ 0, with
/// the contour quantities precomputed in closed form.
#[inline]
#[allow(clippy::too_many_arguments)]
fn smooth_integrand(s1: f64, s2: f64, sig1: f64, sig2: f64, sin_t: f64, cos_t: f64, a: f64, shift: f64, m: &MediumSpec) -> [Complex64; 3] {
    let zeta1 = Complex64::new(sig1 * cos_t, s1 * sin_t);
    let root1 = Complex64::new(s1 * cos_t, sig1 * sin_t);
    // b₀² + ζ₁² with the cancellation-prone part written out.
    let gap = ((m.a0 - sin_t) * (m.a0 + sin_t) + sig2 * sig2 * cos_t * cos_t) / (1.0 + sig2 * sig2);
    let re = gap + sig1 * sig1 * (cos_t - sin_t) * (cos_t + sin_t);
    let im = 2.0 * sig1 * s1 * sin_t * cos_t;
    let p = Complex64::new(re, im).sqrt();
    let q = q_from_parts(root1, p, zeta1, s2, m);
    let w = (shift - a * s1 * s2).exp() / s1;
    [q.q0 * w, q.q1 * w, q.q3 * w]
}

#[allow(clippy::too_many_arguments)]
fn smooth_integral(
    sin_t: f64,
    cos_t: f64,
    a: f64,
    shift: f64,
    hint: f64,
    m: &MediumSpec,
    opts: &KernelOptions,
    evals: &Cell<usize>,
) -> Result<([f64; 3], f64, Option<f64>)> {
    let reach = 1.0 + CUTOFF / a;
    let sig2_max = (reach * reach - 1.0).sqrt();
    let width = 1.0 / a.sqrt();
    let mut outer_breaks = vec![0.0];
    for k in [0.5, 1.0, 2.0, 4.0, 8.0] {
        if k * width < sig2_max {
            outer_breaks.push(k * width);
        }
    }
    if !m.is_homogeneous() && sin_t > m.a0 && sin_t < 1.0 {
        let crit = ((sin_t - m.a0) * (sin_t + m.a0)).sqrt() / cos_t;
        if crit < sig2_max {
            outer_breaks.push(crit);
        }
    }
    outer_breaks.push(sig2_max);
    outer_breaks.sort_by(f64::total_cmp);
    outer_breaks.dedup();

    let inner_abs = 1e-3 * opts.rel_tol * hint;
    let check = opts.check_reality;
    let failure = Cell::new(None::<Error>);
    let outer = integrate(
        |sig2: f64| -> Vals<4> {
            let s2 = (1.0 + sig2 * sig2).sqrt();
            let r1 = reach / s2;
            if r1 <= 1.0 {
                return Vals([0.0; 4]);
            }
            let t_max = (r1 * r1 - 1.0).sqrt().sqrt();
            let t_w = (1.0 / a).powf(0.25);
            let mut breaks = vec![0.0];
            for k in [0.25, 0.5, 1.0, 2.0] {
                if k * t_w < t_max {
                    breaks.push(k * t_w);
                }
            }
            breaks.push(t_max);
            let inner = integrate(
                |t: f64| -> Vals<4> {
                    let sig1 = t * t;
                    let s1 = (1.0 + sig1 * sig1).sqrt();
                    let f = smooth_integrand(s1, s2, sig1, sig2, sin_t, cos_t, a, shift, m);
                    let jac = 2.0 * t;
                    if check {
                        let g = mirrored_integrand(s1, s2, sig1, sig2, sin_t, cos_t, a, shift, m);
                        let im = (f[0] + g).im;
                        Vals([2.0 * f[0].re * jac, 2.0 * f[1].re * jac, 2.0 * f[2].re * jac, im * jac])
                    } else {
                        Vals([2.0 * f[0].re * jac, 2.0 * f[1].re * jac, 2.0 * f[2].re * jac, 0.0])
                    }
                },
                &breaks,
                &opts.adaptive(0.1 * opts.rel_tol, inner_abs),
            );
            evals.set(evals.get() + inner.evaluations);
            if !inner.converged {
                failure.set(Some(Error::Quadrature {
                    what: format!("smooth σ₁-integral at σ₂ = {sig2:.6e}"),
                    achieved: inner.error,
                    requested: inner_abs,
                    evaluations: inner.evaluations,
                }));
            }
            // Both signs of σ₂ contribute equally.
            inner.value * 2.0
        },
        &outer_breaks,
        &opts.adaptive(opts.rel_tol, 1e-2 * opts.rel_tol * hint),
    );
    if let Some(e) = failure.take() {
        return Err(e);
    }
    let outer = checked(outer, "smooth σ₂-integral", opts.rel_tol)?;
    let v = outer.value.0;
    Ok(([v[0], v[1], v[2]], outer.error, check.then_some(v[3].abs())))
}

/// F₀ e^{...} at −σ₁, evaluated independently through the principal branch.
#[allow(clippy::too_many_arguments)]
fn mirrored_integrand(s1: f64, s2: f64, sig1: f64, sig2: f64, sin_t: f64, cos_t: f64, a: f64, shift: f64, m: &MediumSpec) -> Complex64 {
    let zeta1 = Complex64::new(-sig1 * cos_t, s1 * sin_t);
    let bb = (m.a0 * m.a0 + sig2 * sig2) / (1.0 + sig2 * sig2);
    let z2 = zeta1 * zeta1;
    let root1 = (z2 + 1.0).sqrt();
    let p = (z2 + bb).sqrt();
    let q = q_from_parts(root1, p, zeta1, s2, m);
    q.q0 * ((shift - a * s1 * s2).exp() / s1)
}

/// ∫ dζ₂ of the branch-cut integrals (k = 0, ρ, depth), before the
/// τ-dependent prefactors.
fn branch_integral(
    sin_t: f64,
    cos_t: f64,
    a: f64,
    shift: f64,
    m: &MediumSpec,
    opts: &KernelOptions,
    evals: &Cell<usize>,
) -> Result<Estimate<Vals<3>>> {
    let a0 = m.a0;
    let sg = 8.0 * m.gamma_minus.sqrt();
    let zeta_max = ((sin_t - a0) * (sin_t + a0)).sqrt() / cos_t;
    let v_max = zeta_max.sqrt();
    let failure = Cell::new(None::<Error>);
    let v_breaks = {
        let mut b = vec![0.0];
        // Concentration near ζ₂ = 0 (v = v_max) on the scale 1/√A.
        for k in [8.0, 4.0, 2.0, 1.0] {
            let z2 = k / a.sqrt();
            if z2 < zeta_max {
                b.push((zeta_max - z2).sqrt());
            }
        }
        b.push(v_max);
        b.sort_by(f64::total_cmp);
        b.dedup();
        b
    };
    let outer = integrate(
        |v: f64| -> Vals<3> {
            let zeta2 = zeta_max - v * v;
            let s2 = (1.0 + zeta2 * zeta2).sqrt();
            let bz = ((a0 * a0 + zeta2 * zeta2) / (1.0 + zeta2 * zeta2)).sqrt();
            if bz >= sin_t {
                return Vals([0.0; 3]);
            }
            let t_max = (sin_t - bz).sqrt();
            let slope = sin_t - bz * cos_t / (1.0 - bz * bz).sqrt();
            let t_w = 1.0 / (a * s2 * slope.max(1e-300)).sqrt();
            let mut breaks = vec![0.0];
            for k in [0.5, 1.0, 2.0, 4.0, 8.0] {
                if k * t_w < t_max {
                    breaks.push(k * t_w);
                }
            }
            breaks.push(t_max);
            let inner = integrate(
                |t: f64| -> Vals<3> {
                    let w = bz + t * t;
                    let c = ((1.0 - w) * (1.0 + w)).sqrt();
                    let s = t * (2.0 * bz + t * t).sqrt();
                    let g = a0 * a0 * c * s / (a0.powi(4) * c * c + s * s);
                    let lam = w * sin_t + c * cos_t;
                    let e = (shift - a * s2 * lam).exp() * g * 2.0 * t;
                    Vals([e, w * e, c * e])
                },
                &breaks,
                &opts.adaptive(0.1 * opts.rel_tol, 0.0),
            );
            evals.set(evals.get() + inner.evaluations);
            if !inner.converged {
                failure.set(Some(Error::Quadrature {
                    what: format!("branch w-integral at ζ₂ = {zeta2:.6e}"),
                    achieved: inner.error,
                    requested: 0.1 * opts.rel_tol,
                    evaluations: inner.evaluations,
                }));
            }
            let j = inner.value.0;
            // dζ₂ = 2v dv, both signs of ζ₂.
            let jac = 2.0 * v * 2.0;
            Vals([-sg * s2 * j[0] * jac, sg * s2 * s2 * j[1] * jac, sg * s2 * s2 * j[2] * jac])
        },
        &v_breaks,
        &opts.adaptive(opts.rel_tol, 0.0),
    );
    if let Some(e) = failure.take() {
        return Err(e);
    }
    checked(outer, "branch ζ₂-integral", opts.rel_tol)
}

/// Φ_τ(x, y) and ∇ₓΦ_τ(x, y) with their smooth/branch breakdown.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelValue {
    /// Φ_τ · exp(−log_scale).
    pub phi: f64,
    /// ∇ₓΦ_τ · exp(−log_scale).
    pub grad: Vector3<f64>,
    pub log_scale: f64,
    /// Contributions of the smooth and branch parts of E to `phi`.
    pub phi_smooth: f64,
    pub phi_branch: f64,
    /// Relative error estimate of `phi`.
    pub error_estimate: f64,
    pub evaluations: usize,
}

impl KernelValue {
    pub fn phi_value(&self) -> f64 {
        self.phi * self.log_scale.exp()
    }

    pub fn grad_value(&self) -> Vector3<f64> {
        self.grad * self.log_scale.exp()
    }
}

/// Φ_τ(x, y) by direct quadrature of the z'-integral.
///
/// E_τ(x, ·) depends on z' only through |x' − z'|, so the z'-integral is
/// taken in polar coordinates about x': an adaptive radial integral of E
/// against the angular integral of the free upper kernel. The result is
/// scaled by e^{τ l(x,y)}.
pub fn phi_tau(x: &Point3, y: &Point3, tau: f64, m: &MediumSpec, opts: &KernelOptions) -> Result<KernelValue> {
    let sol = geometry::snell_point(x, y, m)?;
    if !(tau >= opts.tau_min) {
        return domain(format!("τ = {tau} is below τ_min = {}", opts.tau_min));
    }
    let l = sol.l_value;
    let depth = -x.z;
    let xh = horizontal(x);
    let dy = horizontal(y) - xh;
    let sep = dy.norm();
    let dir = if sep > 0.0 { dy / sep } else { Vector2::new(1.0, 0.0) };
    let vp = m.slowness_plus();
    let y3 = y.z;

    // Lower bound of the modified path at horizontal radius r.
    let lower = |r: f64| effective_time(r, depth, m) + ((r - sep).max(0.0).hypot(y3)) * vp;
    let r_star = (sol.z_prime - xh).norm();
    let mut r_max = (2.0 * r_star).max(sep).max(depth) + 1.0;
    while tau * (lower(r_max) - l) < CUTOFF {
        r_max *= 2.0;
    }
    let (mut lo, mut hi) = (r_star.max(sep), r_max);
    if tau * (lower(lo) - l) >= CUTOFF {
        lo = r_star;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if tau * (lower(mid) - l) < CUTOFF {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r_max = hi;

    let width = 1.0 / (tau * sol.min_eigenvalue()).sqrt();
    let mut breaks = vec![0.0, r_max];
    for k in [-8.0, -4.0, -2.0, -1.0, 1.0, 2.0, 4.0, 8.0] {
        let b = r_star + k * width;
        if b > 0.0 && b < r_max {
            breaks.push(b);
        }
    }
    if r_star > 0.0 {
        breaks.push(r_star);
    }
    if !m.is_homogeneous() {
        let rc = depth * m.theta0.tan();
        if rc < r_max {
            breaks.push(rc);
        }
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-12 * r_max);

    let failure = Cell::new(None::<Error>);
    let evals = Cell::new(0usize);
    let inner_opts = KernelOptions { rel_tol: 0.1 * opts.rel_tol, ..*opts };
    let est = integrate(
        |r: f64| -> Vals<6> {
            let t_eff = effective_time(r, depth, m);
            let part = match refracted_radial(r, depth, tau, m, Some(-tau * t_eff), &inner_opts) {
                Ok(p) => p,
                Err(e) => {
                    failure.set(Some(e));
                    return Vals([0.0; 6]);
                }
            };
            evals.set(evals.get() + part.evaluations);
            let base = tau * (t_eff - l);
            let ang = angular_moments(r, sep, y3, tau, vp, base, opts);
            evals.set(evals.get() + ang.evaluations);
            let [m0, m1] = ang.value.0;
            Vals([
                r * part.smooth[0] * m0,
                r * part.branch[0] * m0,
                -r * part.smooth[1] * m1,
                -r * part.branch[1] * m1,
                -r * part.smooth[2] * m0,
                -r * part.branch[2] * m0,
            ])
        },
        &breaks,
        &opts.adaptive(opts.rel_tol, 0.0),
    );
    if let Some(e) = failure.take() {
        return Err(e);
    }
    let est = checked(est, "z'-integral of the two-layer kernel", opts.rel_tol)?;
    let pre = tau / (4.0 * PI * m.gamma_plus);
    let v = est.value.0;
    let phi = pre * (v[0] + v[1]);
    let gh = pre * (v[2] + v[3]);
    let g3 = pre * (v[4] + v[5]);
    Ok(KernelValue {
        phi,
        grad: Vector3::new(gh * dir.x, gh * dir.y, g3),
        log_scale: -tau * l,
        phi_smooth: pre * v[0],
        phi_branch: pre * v[1],
        error_estimate: pre * est.error / phi.abs().max(1e-300),
        evaluations: evals.get() + est.evaluations,
    })
}

/// ∫₀^{2π} (1, cos ψ) e^{−τ|z̃'−y|/√γ₊ − base}/|z̃'−y| dψ for z' on the
/// circle of radius r about x', with ψ measured from the direction of y'.
fn angular_moments(r: f64, sep: f64, y3: f64, tau: f64, vp: f64, base: f64, opts: &KernelOptions) -> Estimate<Vals<2>> {
    let kernel = |psi: f64| -> Vals<2> {
        let d = (r * r + sep * sep - 2.0 * r * sep * psi.cos() + y3 * y3).sqrt();
        let e = (-(base + tau * d * vp)).exp() / d;
        Vals([2.0 * e, 2.0 * psi.cos() * e])
    };
    if r == 0.0 || sep == 0.0 {
        // Integrand independent of ψ: the first moment vanishes.
        let v = kernel(0.0);
        return Estimate { value: Vals([v.0[0] * PI, 0.0]), error: 0.0, evaluations: 1, converged: true };
    }
    let w = (1.0 / (tau * vp * r * sep / (r + sep + y3))).sqrt();
    let mut breaks = vec![0.0];
    for k in [0.5, 1.0, 2.0, 4.0, 8.0] {
        if k * w < PI {
            breaks.push(k * w);
        }
    }
    breaks.push(PI);
    integrate(kernel, &breaks, &opts.adaptive(0.1 * opts.rel_tol, 0.0))
}

/// Leading-order asymptotics of Φ_τ and ∇ₓΦ_τ, scaled by e^{τ l(x,y)}.
pub fn phi_tau_asymptotic(x: &Point3, y: &Point3, tau: f64, m: &MediumSpec) -> Result<KernelValue> {
    let sol = geometry::snell_point(x, y, m)?;
    let zt = lift(&sol.z_prime);
    let r = (x - zt).norm();
    let u = (zt - y).norm();
    let e0 = geometry::amplitude_e0(x, &sol.z_prime, m)?;
    let phi = e0 / (r * u) / (8.0 * PI * m.gamma_plus * m.gamma_minus * sol.det_h.sqrt());
    let grad = (x - zt) / r * (phi * -tau * m.slowness_minus());
    Ok(KernelValue {
        phi,
        grad,
        log_scale: -tau * sol.l_value,
        phi_smooth: phi,
        phi_branch: 0.0,
        error_estimate: 0.0,
        evaluations: 0,
    })
}

/// Radial profile of a source supported in a ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceProfile {
    /// f = f₀ on the ball.
    Constant { amplitude: f64 },
    /// f = f₀ on the inner fraction of the radius, then a C² quintic taper to
    /// zero at the sphere.
    Bump { amplitude: f64, inner_fraction: f64 },
}

impl SourceProfile {
    /// f at distance `s` from the center of a ball of radius `eta`.
    pub fn value(&self, s: f64, eta: f64) -> f64 {
        if s >= eta {
            return 0.0;
        }
        match *self {
            SourceProfile::Constant { amplitude } => amplitude,
            SourceProfile::Bump { amplitude, inner_fraction } => {
                let inner = inner_fraction * eta;
                if s <= inner {
                    amplitude
                } else {
                    let u = (s - inner) / (eta - inner);
                    amplitude * (1.0 - u * u * u * (10.0 - 15.0 * u + 6.0 * u * u))
                }
            }
        }
    }

    pub fn amplitude(&self) -> f64 {
        match *self {
            SourceProfile::Constant { amplitude } | SourceProfile::Bump { amplitude, .. } => amplitude,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude() != 0.0 && self.amplitude().is_finite()) {
            return domain("source amplitude must be nonzero");
        }
        if let SourceProfile::Bump { inner_fraction, .. } = *self {
            if !(inner_fraction > 0.0 && inner_fraction < 1.0) {
                return domain("bump inner fraction must lie in (0, 1)");
            }
        }
        Ok(())
    }
}

/// ln of S(κ) = ∫_B f(y) e^{−κ|y−z|}/|y−z| dy · |z−p| e^{κ|z−p|} for any z
/// outside B (mean-value identity for the modified Helmholtz kernel):
/// S(κ) = ∫₀^η f(s) 4πs² sinh(κs)/(κs) ds.
pub fn shell_factor_ln(profile: &SourceProfile, eta: f64, kappa: f64) -> f64 {
    // Integrate S(κ) e^{−κη} to avoid overflow.
    let integrand = |s: f64| -> f64 {
        let f = profile.value(s, eta);
        if s == 0.0 {
            return 0.0;
        }
        let sh = if kappa * s < 1e-8 {
            s * (-kappa * eta).exp()
        } else {
            0.5 * ((kappa * (s - eta)).exp() - (-kappa * (s + eta)).exp()) / kappa
        };
        4.0 * PI * s * f * sh
    };
    let mut breaks = vec![0.0, eta];
    if let SourceProfile::Bump { inner_fraction, .. } = profile {
        breaks.insert(1, inner_fraction * eta);
    }
    for k in [1.0, 4.0, 16.0] {
        let b = eta - k / kappa;
        if b > 0.0 {
            breaks.push(b);
        }
    }
    breaks.sort_by(f64::total_cmp);
    let est = integrate(integrand, &breaks, &AdaptiveOptions { rel_tol: 1e-12, ..Default::default() });
    est.value.abs().ln() + kappa * eta
}

/// Tensor Chebyshev interpolant on a rectangle.
#[derive(Debug, Clone)]
struct Chebyshev2 {
    lo: [f64; 2],
    hi: [f64; 2],
    nodes: [Vec<f64>; 2],
    values: Vec<[f64; 3]>,
}

fn cheb_nodes(n: usize) -> Vec<f64> {
    (0..n).map(|j| ((2 * j + 1) as f64 * PI / (2 * n) as f64).cos()).collect()
}

/// Barycentric weights for Chebyshev points of the first kind.
fn cheb_weights(n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| {
            let s = if j % 2 == 0 { 1.0 } else { -1.0 };
            s * ((2 * j + 1) as f64 * PI / (2 * n) as f64).sin()
        })
        .collect()
}

fn bary(nodes: &[f64], t: f64) -> Vec<f64> {
    let w = cheb_weights(nodes.len());
    if let Some(i) = nodes.iter().position(|&x| x == t) {
        let mut e = vec![0.0; nodes.len()];
        e[i] = 1.0;
        return e;
    }
    let c: Vec<f64> = nodes.iter().zip(&w).map(|(x, wi)| wi / (t - x)).collect();
    let s: f64 = c.iter().sum();
    c.iter().map(|ci| ci / s).collect()
}

impl Chebyshev2 {
    fn map(&self, d: usize, v: f64) -> f64 {
        if self.hi[d] > self.lo[d] {
            (2.0 * v - self.lo[d] - self.hi[d]) / (self.hi[d] - self.lo[d])
        } else {
            0.0
        }
    }

    fn eval(&self, a: f64, b: f64) -> [f64; 3] {
        let ca = bary(&self.nodes[0], self.map(0, a));
        let cb = bary(&self.nodes[1], self.map(1, b));
        let nb = self.nodes[1].len();
        let mut out = [0.0; 3];
        for (i, wa) in ca.iter().enumerate() {
            for (j, wb) in cb.iter().enumerate() {
                let v = self.values[i * nb + j];
                for k in 0..3 {
                    out[k] += wa * wb * v[k];
                }
            }
        }
        out
    }
}

/// Background field v(x) = ∫_B Φ_τ(x, y) f(y) dy of a radial source, for x
/// in a region of the lower half-space.
///
/// For a radial f the upper-layer field outside B equals S(κ) times the
/// field of a point source at the center p, so v = S(κ)·Φ_τ(·, p); Φ_τ(·, p)
/// is axisymmetric about the vertical line through p and is tabulated on a
/// Chebyshev grid in (horizontal distance, x₃), scaled by e^{τ l(x,p)}.
#[derive(Debug, Clone)]
pub struct BallSourceField {
    pub ball: BallSpec,
    pub profile: SourceProfile,
    pub medium: MediumSpec,
    pub tau: f64,
    pub ln_shell: f64,
    table: Chebyshev2,
    pub max_error_estimate: f64,
}

impl BallSourceField {
    /// Tabulates Φ_τ(·, p) for horizontal distances in `rho_range` and
    /// heights in `x3_range` on an `n × n` Chebyshev grid.
    pub fn new(
        ball: BallSpec,
        profile: SourceProfile,
        medium: MediumSpec,
        tau: f64,
        rho_range: [f64; 2],
        x3_range: [f64; 2],
        n: usize,
        opts: &KernelOptions,
    ) -> Result<Self> {
        ball.validate()?;
        profile.validate()?;
        if !(x3_range[1] < 0.0) || x3_range[0] > x3_range[1] || rho_range[0] < 0.0 || rho_range[0] > rho_range[1] {
            return domain("tabulation region must be a nonempty box in the lower half-space");
        }
        let p = ball.p();
        let nodes = [cheb_nodes(n), cheb_nodes(n)];
        let mut values = Vec::with_capacity(n * n);
        let mut max_err = 0.0_f64;
        let unmap = |t: f64, r: [f64; 2]| 0.5 * (r[0] + r[1]) + 0.5 * (r[1] - r[0]) * t;
        for &ta in &nodes[0] {
            for &tb in &nodes[1] {
                let rho = unmap(ta, rho_range);
                let x3 = unmap(tb, x3_range);
                let x = Vector3::new(p.x + rho, p.y, x3);
                let k = phi_tau(&x, &p, tau, &medium, opts)?;
                max_err = max_err.max(k.error_estimate);
                values.push([k.phi, k.grad.x, k.grad.z]);
            }
        }
        let kappa = tau * medium.slowness_plus();
        Ok(Self {
            ball,
            profile,
            medium,
            tau,
            ln_shell: shell_factor_ln(&profile, ball.radius, kappa),
            table: Chebyshev2 { lo: [rho_range[0], x3_range[0]], hi: [rho_range[1], x3_range[1]], nodes, values },
            max_error_estimate: max_err,
        })
    }

    /// Scaled v and ∇v at x, with `true = scaled · exp(log_scale)`.
    pub fn eval(&self, x: &Point3) -> Result<(f64, Vector3<f64>, f64)> {
        let p = self.ball.p();
        let d = horizontal(x) - horizontal(&p);
        let rho = d.norm();
        let [phi, g_rho, g3] = self.table.eval(rho, x.z);
        let e = if rho > 0.0 { d / rho } else { Vector2::zeros() };
        let l = geometry::optical_distance(x, &p, &self.medium)?;
        Ok((phi, Vector3::new(g_rho * e.x, g_rho * e.y, g3), self.ln_shell - self.tau * l))
    }
}
