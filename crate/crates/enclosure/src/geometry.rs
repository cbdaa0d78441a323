//! Fermat/Snell geometry of the two-layer medium: refraction points, optical
//! distances, the total-reflection modified path, travel-time bounds, the
//! leading amplitude and the enclosure region estimate.

use nalgebra::{Matrix2, SymmetricEigen, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::shapes::{BallSpec, Ellipsoid, Shape};
use crate::Point3;

/// Two-layer background: speed² `gamma_plus` above the interface x3 = 0 and
/// `gamma_minus` below it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MediumSpec {
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub a0: f64,
    pub theta0: f64,
}

#[derive(Serialize, Deserialize)]
struct MediumRepr {
    gamma_plus: f64,
    gamma_minus: f64,
}

impl Serialize for MediumSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MediumRepr { gamma_plus: self.gamma_plus, gamma_minus: self.gamma_minus }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for MediumSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = MediumRepr::deserialize(d)?;
        MediumSpec::new(r.gamma_plus, r.gamma_minus).map_err(serde::de::Error::custom)
    }
}

impl MediumSpec {
    /// Total-reflection regime requires `gamma_plus > gamma_minus > 0`; the
    /// homogeneous case `gamma_plus == gamma_minus` is accepted as a
    /// reference limit (a0 = 1, no critical angle).
    pub fn new(gamma_plus: f64, gamma_minus: f64) -> Result<Self> {
        if !(gamma_minus > 0.0) || !(gamma_plus >= gamma_minus) || !gamma_plus.is_finite() {
            return domain(format!(
                "need gamma_plus >= gamma_minus > 0, got gamma_plus = {gamma_plus}, gamma_minus = {gamma_minus}"
            ));
        }
        let a0 = (gamma_minus / gamma_plus).sqrt();
        Ok(Self { gamma_plus, gamma_minus, a0, theta0: a0.asin() })
    }

    pub fn homogeneous(gamma: f64) -> Result<Self> {
        Self::new(gamma, gamma)
    }

    pub fn is_homogeneous(&self) -> bool {
        self.gamma_plus == self.gamma_minus
    }

    pub fn slowness_minus(&self) -> f64 {
        1.0 / self.gamma_minus.sqrt()
    }

    pub fn slowness_plus(&self) -> f64 {
        1.0 / self.gamma_plus.sqrt()
    }

    /// Background coefficient at height x3 (the interface itself counts as
    /// the lower layer).
    pub fn gamma_at(&self, x3: f64) -> f64 {
        if x3 > 0.0 {
            self.gamma_plus
        } else {
            self.gamma_minus
        }
    }
}

/// Lift of an interface point to the plane x3 = 0.
pub fn lift(z: &Vector2<f64>) -> Point3 {
    Vector3::new(z.x, z.y, 0.0)
}

pub fn horizontal(x: &Point3) -> Vector2<f64> {
    Vector2::new(x.x, x.y)
}

fn check_pair(x: &Point3, y: &Point3) -> Result<()> {
    if !(x.z < 0.0) {
        return domain(format!("field point must satisfy x3 < 0, got x3 = {}", x.z));
    }
    if !(y.z > 0.0) {
        return domain(format!("source point must satisfy y3 > 0, got y3 = {}", y.z));
    }
    Ok(())
}

/// Travel time of the broken ray x → z̃' → y.
pub fn path_time(x: &Point3, y: &Point3, z: &Vector2<f64>, m: &MediumSpec) -> Result<f64> {
    check_pair(x, y)?;
    let zt = lift(z);
    Ok((zt - x).norm() * m.slowness_minus() + (zt - y).norm() * m.slowness_plus())
}

/// Refraction point z'(x, y) together with the optical time and the Hessian
/// of the travel time at z'.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefractionSolution {
    pub z_prime: Vector2<f64>,
    pub l_value: f64,
    pub theta_minus: f64,
    pub theta_plus: f64,
    pub hessian: Matrix2<f64>,
    pub det_h: f64,
}

impl RefractionSolution {
    /// |sin θ₋/√γ₋ − sin θ₊/√γ₊|.
    pub fn snell_residual(&self, m: &MediumSpec) -> f64 {
        (self.theta_minus.sin() * m.slowness_minus() - self.theta_plus.sin() * m.slowness_plus()).abs()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let e = SymmetricEigen::new(self.hessian).eigenvalues;
        e[0].min(e[1])
    }
}

/// Hessian of z' ↦ |z̃' − x| at a point with horizontal offset `d = z' − x'`
/// and distance `r`.
fn distance_hessian(d: &Vector2<f64>, r: f64) -> Matrix2<f64> {
    Matrix2::identity() / r - d * d.transpose() / (r * r * r)
}

/// Second derivatives of the travel time with respect to z'.
pub fn path_hessian(x: &Point3, y: &Point3, z: &Vector2<f64>, m: &MediumSpec) -> Matrix2<f64> {
    let zt = lift(z);
    let d1 = z - horizontal(x);
    let d2 = z - horizontal(y);
    distance_hessian(&d1, (zt - x).norm()) * m.slowness_minus()
        + distance_hessian(&d2, (zt - y).norm()) * m.slowness_plus()
}

/// Unique minimizer of the travel time over the interface.
///
/// The minimizer lies on the segment x'y', so the problem is solved in the
/// arclength `s` along that segment with a safeguarded Newton iteration on
/// the (monotone) derivative.
pub fn snell_point(x: &Point3, y: &Point3, m: &MediumSpec) -> Result<RefractionSolution> {
    check_pair(x, y)?;
    let xh = horizontal(x);
    let yh = horizontal(y);
    let sep = (yh - xh).norm();
    let a = -x.z;
    let b = y.z;
    let (vm, vp) = (m.slowness_minus(), m.slowness_plus());

    let z = if sep == 0.0 {
        xh
    } else {
        let g = |s: f64| s * vm / (s * s + a * a).sqrt() - (sep - s) * vp / ((sep - s).powi(2) + b * b).sqrt();
        let dg = |s: f64| {
            a * a * vm / (s * s + a * a).powf(1.5) + b * b * vp / ((sep - s).powi(2) + b * b).powf(1.5)
        };
        let (mut lo, mut hi) = (0.0, sep);
        let mut s = 0.5 * sep;
        let tol = 1e-12 * sep;
        for _ in 0..200 {
            let gs = g(s);
            if gs == 0.0 {
                break;
            }
            if gs < 0.0 {
                lo = s;
            } else {
                hi = s;
            }
            let newton = s - gs / dg(s);
            let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            let step = (next - s).abs();
            s = next;
            if step < tol * 1e-3 || hi - lo < tol {
                break;
            }
        }
        xh + (yh - xh) * (s / sep)
    };

    let zt = lift(&z);
    let r1 = (zt - x).norm();
    let r2 = (zt - y).norm();
    let theta_minus = ((z - xh).norm() / r1).clamp(0.0, 1.0).asin();
    let theta_plus = ((z - yh).norm() / r2).clamp(0.0, 1.0).asin();
    let hessian = path_hessian(x, y, &z, m);
    Ok(RefractionSolution {
        z_prime: z,
        l_value: r1 * vm + r2 * vp,
        theta_minus,
        theta_plus,
        det_h: hessian.determinant(),
        hessian,
    })
}

/// Optical time l(x, y).
pub fn optical_distance(x: &Point3, y: &Point3, m: &MediumSpec) -> Result<f64> {
    Ok(snell_point(x, y, m)?.l_value)
}

/// Gradients of l(x, y) with respect to x and y (envelope theorem).
pub fn optical_distance_gradients(x: &Point3, y: &Point3, m: &MediumSpec) -> Result<(f64, Point3, Point3)> {
    let sol = snell_point(x, y, m)?;
    let zt = lift(&sol.z_prime);
    let gx = (x - zt).normalize() * m.slowness_minus();
    let gy = (y - zt).normalize() * m.slowness_plus();
    Ok((sol.l_value, gx, gy))
}

/// Result of [`optical_distance_sets`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetDistance {
    pub l: f64,
    pub x_star: Point3,
    pub y_star: Point3,
}

const MULTISTARTS: usize = 32;

fn surface_point(e: &Ellipsoid, n: &Vector3<f64>) -> Point3 {
    e.point(&n.normalize())
}

/// Gradient of F(n) = g(c + A n/|n|) with respect to n, given ∇g.
fn pull_back(e: &Ellipsoid, n: &Vector3<f64>, g: &Vector3<f64>) -> Vector3<f64> {
    let nn = n.norm();
    let u = n / nn;
    let ag = e.semi_axes.component_mul(g);
    (ag - u * u.dot(&ag)) / nn
}

/// BFGS descent of l over (∂D piece) × ∂B from one start.
fn descend(
    d: &Ellipsoid,
    b: &Ellipsoid,
    start: [Vector3<f64>; 2],
    m: &MediumSpec,
) -> Result<(f64, Vector3<f64>, Vector3<f64>)> {
    let eval = |v: &nalgebra::SVector<f64, 6>| -> Result<(f64, nalgebra::SVector<f64, 6>)> {
        let nd = Vector3::new(v[0], v[1], v[2]);
        let nb = Vector3::new(v[3], v[4], v[5]);
        let (l, gx, gy) = optical_distance_gradients(&surface_point(d, &nd), &surface_point(b, &nb), m)?;
        let a = pull_back(d, &nd, &gx);
        let c = pull_back(b, &nb, &gy);
        Ok((l, nalgebra::SVector::<f64, 6>::from_column_slice(&[a.x, a.y, a.z, c.x, c.y, c.z])))
    };
    let mut v = nalgebra::SVector::<f64, 6>::from_column_slice(&[
        start[0].x, start[0].y, start[0].z, start[1].x, start[1].y, start[1].z,
    ]);
    let (mut f, mut g) = eval(&v)?;
    let mut hinv = nalgebra::SMatrix::<f64, 6, 6>::identity();
    let mut stalls = 0;
    for _ in 0..500 {
        if g.norm() < 1e-13 {
            break;
        }
        let mut p = -(hinv * g);
        if p.dot(&g) >= 0.0 {
            hinv = nalgebra::SMatrix::<f64, 6, 6>::identity();
            p = -g;
        }
        let mut step = 1.0;
        let slope = p.dot(&g);
        let mut accepted = None;
        for _ in 0..60 {
            let trial = v + p * step;
            let (ft, gt) = eval(&trial)?;
            if ft <= f + 1e-4 * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((mut vn, fnew, gnew)) = accepted else { break };
        // Keep both direction vectors on the unit sphere.
        for k in [0usize, 3] {
            let nrm = (vn[k].powi(2) + vn[k + 1].powi(2) + vn[k + 2].powi(2)).sqrt();
            for j in 0..3 {
                vn[k + j] /= nrm;
            }
        }
        let s = vn - v;
        let yv = gnew - g;
        let sy = s.dot(&yv);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let i = nalgebra::SMatrix::<f64, 6, 6>::identity();
            hinv = (i - s * yv.transpose() * rho) * hinv * (i - yv * s.transpose() * rho) + s * s.transpose() * rho;
        }
        let df = f - fnew;
        v = vn;
        f = fnew;
        g = gnew;
        if df <= 1e-15 * f.abs() {
            stalls += 1;
            if stalls >= 3 {
                break;
            }
        } else {
            stalls = 0;
        }
    }
    Ok((f, Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5])))
}

/// l(D, B) = inf over x ∈ D̄, y ∈ B̄ of l(x, y), with a minimizing pair.
///
/// The infimum is attained on the boundaries; each convex piece of D is
/// searched by multistart quasi-Newton descent over unit-vector
/// parametrizations of ∂D × ∂B.
pub fn optical_distance_sets(d: &Shape, b: &BallSpec, m: &MediumSpec) -> Result<SetDistance> {
    d.validate()?;
    b.validate()?;
    let ball = Ellipsoid { center: b.p(), semi_axes: Vector3::repeat(b.radius) };
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b7d_15e7);
    let mut best: Option<SetDistance> = None;
    for piece in d.pieces() {
        let towards = (ball.center - piece.center).normalize();
        let mut starts = vec![[towards, -towards]];
        while starts.len() < MULTISTARTS {
            let mut draw = || {
                let v = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
                if v.norm() < 1e-3 {
                    towards
                } else {
                    v.normalize()
                }
            };
            let s = [draw(), draw()];
            starts.push(s);
        }
        for s in starts {
            let (l, nd, nb) = descend(&piece, &ball, s, m)?;
            if best.map_or(true, |bst| l < bst.l) {
                best = Some(SetDistance { l, x_star: surface_point(&piece, &nd), y_star: surface_point(&ball, &nb) });
            }
        }
    }
    Ok(best.expect("at least one piece"))
}

/// Total-reflection modified path l̃_{x,y}(z') together with the
/// intermediate interface point z₀' of the rearranged form (present only on
/// the total-reflection branch).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModifiedPath {
    pub value: f64,
    pub z0: Option<Vector2<f64>>,
    pub rearranged: Option<f64>,
}

/// l̃_{x,y}(z'): the travel time when z' lies inside the critical cone of x,
/// otherwise the path that runs along the interface from the critical point.
pub fn modified_path_detail(x: &Point3, y: &Point3, z: &Vector2<f64>, m: &MediumSpec) -> Result<ModifiedPath> {
    check_pair(x, y)?;
    let zt = lift(z);
    let xh = horizontal(x);
    let rho = (z - xh).norm();
    let r = (zt - x).norm();
    if rho < m.a0 * r {
        return Ok(ModifiedPath { value: path_time(x, y, z, m)?, z0: None, rearranged: None });
    }
    let depth = -x.z;
    let up = (zt - y).norm();
    let value = depth * m.theta0.cos() * m.slowness_minus() + (rho + up) * m.slowness_plus();
    let z0 = if rho > 0.0 { xh + (z - xh) * (depth * m.theta0.tan() / rho) } else { xh };
    let rearranged = (lift(&z0) - x).norm() * m.slowness_minus() + ((z0 - z).norm() + up) * m.slowness_plus();
    debug_assert!(
        (rearranged - value).abs() <= 1e-12 * value.abs().max(1.0),
        "modified path forms disagree: {value} vs {rearranged}"
    );
    Ok(ModifiedPath { value, z0: Some(z0), rearranged: Some(rearranged) })
}

pub fn modified_path(x: &Point3, y: &Point3, z: &Vector2<f64>, m: &MediumSpec) -> Result<f64> {
    Ok(modified_path_detail(x, y, z, m)?.value)
}

/// Angle θ ∈ [0, π/2) of the ray from x to z̃' measured from the vertical.
pub fn incidence_angle(x: &Point3, z: &Vector2<f64>) -> f64 {
    (z - horizontal(x)).norm().atan2(-x.z)
}

/// T_{x,z'}(α) = (|x3| cos α + |z' − x'| sin α)/√γ₋.
pub fn travel_bound(x: &Point3, z: &Vector2<f64>, alpha: f64, m: &MediumSpec) -> Result<f64> {
    if !(x.z < 0.0) {
        return domain(format!("field point must satisfy x3 < 0, got x3 = {}", x.z));
    }
    let rho = (z - horizontal(x)).norm();
    let t = (-x.z * alpha.cos() + rho * alpha.sin()) * m.slowness_minus();
    let theta = incidence_angle(x, z);
    let alt = (lift(z) - x).norm() * (theta - alpha).cos() * m.slowness_minus();
    debug_assert!((t - alt).abs() <= 1e-12 * t.abs().max(alt.abs()).max(1e-300), "travel bound identity: {t} vs {alt}");
    Ok(t)
}

/// Membership of z' in the cone 𝒰_δ(x) = {|x' − z'| < a₀ δ |x − z̃'|}.
pub fn in_cone(x: &Point3, z: &Vector2<f64>, delta: f64, m: &MediumSpec) -> bool {
    let rho = (z - horizontal(x)).norm();
    let r = (lift(z) - x).norm();
    let inside = rho < m.a0 * delta * r;
    let ad = m.a0 * delta;
    if ad < 1.0 {
        let bound = ad / (1.0 - ad * ad).sqrt() * x.z.abs();
        let slab = rho < bound;
        debug_assert!(
            slab == inside || (rho - bound).abs() <= 1e-12 * bound.max(rho),
            "cone forms disagree at rho = {rho}, bound = {bound}"
        );
    }
    inside
}

/// Leading amplitude E₀(x − z̃') of the refracted part; defined strictly
/// inside the critical cone.
pub fn amplitude_e0(x: &Point3, z: &Vector2<f64>, m: &MediumSpec) -> Result<f64> {
    if !(x.z < 0.0) {
        return domain(format!("field point must satisfy x3 < 0, got x3 = {}", x.z));
    }
    let rho = (z - horizontal(x)).norm();
    let r = (lift(z) - x).norm();
    let depth = -x.z;
    let rad = m.a0 * m.a0 * r * r - rho * rho;
    if !(rad > 0.0) {
        return domain("amplitude undefined on or beyond the critical cone");
    }
    let s = rad.sqrt();
    Ok(4.0 * m.gamma_minus.sqrt() * depth * s / (r * (s + m.a0 * m.a0 * depth)))
}

/// Membership of each probe point in E = {x : l(x, p) > l(D,B) + η/√γ₊}.
pub fn region_estimate(l_db: f64, b: &BallSpec, m: &MediumSpec, probes: &[Point3]) -> Result<Vec<bool>> {
    if !(l_db > 0.0) {
        return domain("l(D,B) must be positive");
    }
    let threshold = l_db + b.radius * m.slowness_plus();
    let p = b.p();
    probes.iter().map(|x| Ok(optical_distance(x, &p, m)? > threshold)).collect()
}
