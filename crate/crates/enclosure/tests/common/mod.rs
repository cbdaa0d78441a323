//! Independent test oracles. None of these call the library's solvers.
#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};

pub type P3 = Vector3<f64>;

/// Travel time through interface point (z1, z2), written out directly.
pub fn travel(x: &P3, y: &P3, z1: f64, z2: f64, gp: f64, gm: f64) -> f64 {
    let a = ((x.x - z1).powi(2) + (x.y - z2).powi(2) + x.z * x.z).sqrt();
    let b = ((y.x - z1).powi(2) + (y.y - z2).powi(2) + y.z * y.z).sqrt();
    a / gm.sqrt() + b / gp.sqrt()
}

/// Minimum of the travel time over an n×n grid covering the box spanned by
/// x' and y' (plus a margin), with the grid spacing.
pub fn grid_min(x: &P3, y: &P3, gp: f64, gm: f64, n: usize, center: Option<(f64, f64, f64)>) -> (f64, Vector2<f64>, f64) {
    let (cx, cy, half) = center.unwrap_or_else(|| {
        let half = 0.5 * (x.x - y.x).abs().max((x.y - y.y).abs()) + 0.05;
        (0.5 * (x.x + y.x), 0.5 * (x.y + y.y), half)
    });
    let h = 2.0 * half / (n - 1) as f64;
    let mut best = (f64::INFINITY, Vector2::zeros());
    for i in 0..n {
        for j in 0..n {
            let z1 = cx - half + i as f64 * h;
            let z2 = cy - half + j as f64 * h;
            let t = travel(x, y, z1, z2, gp, gm);
            if t < best.0 {
                best = (t, Vector2::new(z1, z2));
            }
        }
    }
    (best.0, best.1, h)
}

/// Fermat minimum by successively zoomed grids (down to ~1e-9 spacing).
pub fn fermat_zoom(x: &P3, y: &P3, gp: f64, gm: f64) -> (f64, Vector2<f64>) {
    let (mut t, mut z, mut h) = grid_min(x, y, gp, gm, 201, None);
    while h > 1e-10 {
        let (t2, z2, h2) = grid_min(x, y, gp, gm, 21, Some((z.x, z.y, 2.0 * h)));
        t = t2;
        z = z2;
        h = h2;
    }
    (t, z)
}

/// Golden-section minimum of the travel time along the segment x'y'.
pub fn fermat_segment(x: &P3, y: &P3, gp: f64, gm: f64) -> f64 {
    let f = |s: f64| travel(x, y, x.x + s * (y.x - x.x), x.y + s * (y.y - x.y), gp, gm);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (0.0, 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    f(0.5 * (a + b)).min(f(0.0)).min(f(1.0))
}

fn sphere_point(c: &P3, axes: &P3, th: f64, ph: f64) -> P3 {
    c + axes.component_mul(&P3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()))
}

/// Brute-force l(D, B) for an ellipsoid D and a ball B: grid over both
/// boundaries in spherical angles, then successively zoomed local grids.
pub fn brute_set_distance(dc: &P3, daxes: &P3, bc: &P3, br: f64, gp: f64, gm: f64) -> f64 {
    let baxes = P3::repeat(br);
    let eval = |a: [f64; 4]| {
        let x = sphere_point(dc, daxes, a[0], a[1]);
        let y = sphere_point(bc, &baxes, a[2], a[3]);
        fermat_segment(&x, &y, gp, gm)
    };
    let n = 16;
    let mut best = (f64::INFINITY, [0.0; 4]);
    for i in 0..=n {
        for j in 0..2 * n {
            for k in 0..=n {
                for l in 0..2 * n {
                    let a = [
                        PI * i as f64 / n as f64,
                        PI * j as f64 / n as f64,
                        PI * k as f64 / n as f64,
                        PI * l as f64 / n as f64,
                    ];
                    let v = eval(a);
                    if v < best.0 {
                        best = (v, a);
                    }
                }
            }
        }
    }
    let mut h = PI / n as f64;
    while h > 1e-5 {
        let mut improved = best;
        let m = 3;
        for i in -m..=m {
            for j in -m..=m {
                for k in -m..=m {
                    for l in -m..=m {
                        let a = [
                            best.1[0] + i as f64 * h / m as f64,
                            best.1[1] + j as f64 * h / m as f64,
                            best.1[2] + k as f64 * h / m as f64,
                            best.1[3] + l as f64 * h / m as f64,
                        ];
                        let v = eval(a);
                        if v < improved.0 {
                            improved = (v, a);
                        }
                    }
                }
            }
        }
        if improved.0 < best.0 {
            best = improved;
        } else {
            h *= 0.5;
        }
    }
    best.0
}

/// Bessel J₀ by the trapezoidal rule on its periodic integral representation.
pub fn bessel_j0(z: f64) -> f64 {
    let n = 256;
    let mut s = 0.0;
    for k in 0..n {
        let t = PI * (k as f64 + 0.5) / n as f64;
        s += (z * t.sin()).cos();
    }
    s / n as f64
}

/// Two-layer kernel by its Sommerfeld (Hankel-transform) integral,
/// Φ = (1/2π) ∫₀^∞ q J₀(qD) e^{−k₋|x₃|−k₊y₃}/(γ₊k₊+γ₋k₋) dq with
/// k± = √(q² + τ²/γ±), by composite Simpson on a truncated range.
pub fn sommerfeld(x: &P3, y: &P3, tau: f64, gp: f64, gm: f64) -> f64 {
    let dist = ((x.x - y.x).powi(2) + (x.y - y.y).powi(2)).sqrt();
    let depth = -x.z + y.z;
    let q_max = 50.0 / depth;
    let n = 40_000;
    let h = q_max / n as f64;
    let f = |q: f64| {
        let km = (q * q + tau * tau / gm).sqrt();
        let kp = (q * q + tau * tau / gp).sqrt();
        q * bessel_j0(q * dist) * (-km * (-x.z) - kp * y.z).exp() / (gp * kp + gm * km)
    };
    let mut s = f(0.0) + f(q_max);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0 / (2.0 * PI)
}

/// Solves (∇·γ∇ − τ²)u = −g on a cube [−half, half]³ with zero Dirichlet
/// data, γ = γ₊ above x₃ = 0 and γ₋ below, g a normalized Gaussian of width
/// `s` centered at `src`. Nodes: x_i = −half + i·h horizontally and
/// x₃ = −half + (k + ½)h vertically, so the interface sits midway between
/// node planes. Face coefficients are harmonic means. Returns u at node
/// indices `probe` by Jacobi-preconditioned conjugate gradients.
pub fn fd_elliptic(gp: f64, gm: f64, tau: f64, src: &P3, s: f64, half: f64, h: f64, probe: [usize; 3]) -> (f64, P3) {
    let n = (2.0 * half / h).round() as usize;
    let nz = n;
    let idx = |i: usize, j: usize, k: usize| (k * n + j) * n + i;
    let zc = |k: usize| -half + (k as f64 + 0.5) * h;
    let xc = |i: usize| -half + i as f64 * h;
    let gam = |k: usize| if zc(k) > 0.0 { gp } else { gm };
    let hm = |a: f64, b: f64| 2.0 * a * b / (a + b);
    let size = n * n * nz;
    let mut rhs = vec![0.0; size];
    let norm = (2.0 * PI * s * s).powf(-1.5);
    for k in 0..nz {
        for j in 0..n {
            for i in 0..n {
                let r2 = (xc(i) - src.x).powi(2) + (xc(j) - src.y).powi(2) + (zc(k) - src.z).powi(2);
                rhs[idx(i, j, k)] = norm * (-0.5 * r2 / (s * s)).exp();
            }
        }
    }
    let h2 = h * h;
    // A u = −∇·γ∇u + τ²u (SPD), with u = 0 outside the node box.
    let diag: Vec<f64> = (0..size)
        .map(|c| {
            let k = c / (n * n);
            let g = gam(k);
            let up = if k + 1 < nz { hm(g, gam(k + 1)) } else { g };
            let dn = if k > 0 { hm(g, gam(k - 1)) } else { g };
            (4.0 * g + up + dn) / h2 + tau * tau
        })
        .collect();
    let apply = |u: &[f64], out: &mut [f64]| {
        for k in 0..nz {
            let g = gam(k);
            let up = if k + 1 < nz { hm(g, gam(k + 1)) } else { g };
            let dn = if k > 0 { hm(g, gam(k - 1)) } else { g };
            for j in 0..n {
                for i in 0..n {
                    let c = idx(i, j, k);
                    let mut acc = (4.0 * g + up + dn) / h2 * u[c] + tau * tau * u[c];
                    if i > 0 { acc -= g / h2 * u[c - 1]; }
                    if i + 1 < n { acc -= g / h2 * u[c + 1]; }
                    if j > 0 { acc -= g / h2 * u[c - n]; }
                    if j + 1 < n { acc -= g / h2 * u[c + n]; }
                    if k > 0 { acc -= dn / h2 * u[c - n * n]; }
                    if k + 1 < nz { acc -= up / h2 * u[c + n * n]; }
                    out[c] = acc;
                }
            }
        }
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut u = vec![0.0; size];
    let mut r = rhs.clone();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(a, d)| a / d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; size];
    let mut rz = dot(&r, &z);
    let r0 = dot(&r, &r).sqrt();
    for _ in 0..5000 {
        apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for c in 0..size {
            u[c] += alpha * p[c];
            r[c] -= alpha * ap[c];
        }
        if dot(&r, &r).sqrt() < 1e-12 * r0 {
            break;
        }
        for c in 0..size {
            z[c] = r[c] / diag[c];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for c in 0..size {
            p[c] = z[c] + beta * p[c];
        }
    }
    let [i, j, k] = probe;
    (u[idx(i, j, k)], P3::new(xc(i), xc(j), zc(k)))
}

/// Full-field leapfrog for (∂t² − ∇·γ∇)u = 0 on a Dirichlet box, written
/// independently of the library solver and without any sponge. Nodes are
/// x = (o₀+i)h, (o₁+j)h, (o₂+k+½)h for i < dims[0] etc.; the outermost
/// layer is held at zero. `coef(x)` gives the per-axis node coefficient and
/// `f(x)` the initial velocity. Returns Σ f(x)h³ u(t_n, x) for n = 0..=steps.
pub fn fd_wave_projection(
    dims: [usize; 3],
    offsets: [i64; 3],
    h: f64,
    dt: f64,
    steps: usize,
    coef: &dyn Fn(&P3) -> [f64; 3],
    f: &dyn Fn(&P3) -> f64,
) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let idx = |i: usize, j: usize, k: usize| (k * ny + j) * nx + i;
    let pos = |i: usize, j: usize, k: usize| {
        P3::new((offsets[0] + i as i64) as f64 * h, (offsets[1] + j as i64) as f64 * h, ((offsets[2] + k as i64) as f64 + 0.5) * h)
    };
    let size = nx * ny * nz;
    let mut c = vec![[0.0; 3]; size];
    let mut fv = vec![0.0; size];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let x = pos(i, j, k);
                c[idx(i, j, k)] = coef(&x);
                if i > 0 && j > 0 && k > 0 && i + 1 < nx && j + 1 < ny && k + 1 < nz {
                    fv[idx(i, j, k)] = f(&x);
                }
            }
        }
    }
    let hm = |a: f64, b: f64| 2.0 * a * b / (a + b);
    let lap = |u: &[f64], out: &mut [f64]| {
        for k in 1..nz - 1 {
            for j in 1..ny - 1 {
                for i in 1..nx - 1 {
                    let p = idx(i, j, k);
                    let mut acc = 0.0;
                    for (a, q) in [(0, idx(i + 1, j, k)), (0, idx(i - 1, j, k)), (1, idx(i, j + 1, k)), (1, idx(i, j - 1, k)), (2, idx(i, j, k + 1)), (2, idx(i, j, k - 1))] {
                        acc += hm(c[p][a], c[q][a]) * (u[q] - u[p]);
                    }
                    out[p] = acc / (h * h);
                }
            }
        }
    };
    let project = |u: &[f64]| -> f64 { fv.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() * h * h * h };
    let mut lf = vec![0.0; size];
    lap(&fv, &mut lf);
    let mut u0 = vec![0.0; size];
    let mut u1: Vec<f64> = fv.iter().zip(&lf).map(|(a, b)| dt * a + dt * dt * dt / 6.0 * b).collect();
    let mut lu = vec![0.0; size];
    let mut out = vec![project(&u0), project(&u1)];
    for _ in 1..steps {
        lap(&u1, &mut lu);
        for p in 0..size {
            u0[p] = 2.0 * u1[p] - u0[p] + dt * dt * lu[p];
        }
        std::mem::swap(&mut u0, &mut u1);
        out.push(project(&u1));
    }
    out
}

/// Fraction of the cube of side h around x covered by a ball, by n³ midpoint samples.
pub fn ball_fraction(x: &P3, center: &P3, radius: f64, h: f64, n: usize) -> f64 {
    let mut inside = 0;
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                let off = |s: usize| h * ((s as f64 + 0.5) / n as f64 - 0.5);
                if (x + P3::new(off(a), off(b), off(c)) - center).norm() < radius {
                    inside += 1;
                }
            }
        }
    }
    inside as f64 / (n * n * n) as f64
}
