//! One-dimensional quadrature: globally adaptive Gauss–Kronrod (7/15),
//! fixed Gauss–Legendre rules and composite Simpson weights.

use std::ops::{Add, Mul, Sub};

/// Values that can be integrated: a vector space with a norm.
pub trait QuadValue: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self> {
    fn zero() -> Self;
    fn norm(&self) -> f64;
}

impl QuadValue for f64 {
    fn zero() -> Self {
        0.0
    }
    fn norm(&self) -> f64 {
        self.abs()
    }
}

/// Fixed-size real vector integrand, normed by its largest component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vals<const N: usize>(pub [f64; N]);

impl<const N: usize> Add for Vals<N> {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a += b;
        }
        self
    }
}

impl<const N: usize> Sub for Vals<N> {
    type Output = Self;
    fn sub(mut self, rhs: Self) -> Self {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a -= b;
        }
        self
    }
}

impl<const N: usize> Mul<f64> for Vals<N> {
    type Output = Self;
    fn mul(mut self, rhs: f64) -> Self {
        for a in self.0.iter_mut() {
            *a *= rhs;
        }
        self
    }
}

impl<const N: usize> QuadValue for Vals<N> {
    fn zero() -> Self {
        Vals([0.0; N])
    }
    fn norm(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Tolerances for [`integrate`].
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_intervals: usize,
}

impl Default for AdaptiveOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 0.0,
            max_intervals: 400,
        }
    }
}

/// Result of an adaptive integration.
#[derive(Debug, Clone, Copy)]
pub struct Estimate<V> {
    pub value: V,
    pub error: f64,
    pub evaluations: usize,
    pub converged: bool,
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// Single Gauss–Kronrod 15-point panel: (Kronrod value, |Kronrod − Gauss|).
pub fn gk15<V: QuadValue, F: FnMut(f64) -> V>(f: &mut F, a: f64, b: f64) -> (V, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kron = kron + s * WGK[j];
        if j % 2 == 1 {
            gauss = gauss + s * WG[j / 2];
        }
    }
    let kron = kron * h;
    let gauss = gauss * h;
    (kron, (kron - gauss).norm())
}

struct Panel<V> {
    a: f64,
    b: f64,
    value: V,
    error: f64,
}

/// Globally adaptive Gauss–Kronrod integration over `[breaks[0], breaks[last]]`,
/// starting from the panels defined by the (sorted) breakpoints.
pub fn integrate<V, F>(mut f: F, breaks: &[f64], opts: &AdaptiveOptions) -> Estimate<V>
where
    V: QuadValue,
    F: FnMut(f64) -> V,
{
    let mut panels: Vec<Panel<V>> = Vec::new();
    let mut evaluations = 0;
    for w in breaks.windows(2) {
        if w[1] > w[0] {
            let (value, error) = gk15(&mut f, w[0], w[1]);
            evaluations += 15;
            panels.push(Panel { a: w[0], b: w[1], value, error });
        }
    }
    if panels.is_empty() {
        return Estimate { value: V::zero(), error: 0.0, evaluations, converged: true };
    }
    loop {
        let total = panels.iter().fold(V::zero(), |s, p| s + p.value);
        let err: f64 = panels.iter().map(|p| p.error).sum();
        let target = opts.abs_tol.max(opts.rel_tol * total.norm());
        if err <= target || panels.len() >= opts.max_intervals {
            return Estimate { value: total, error: err, evaluations, converged: err <= target };
        }
        let (idx, _) = panels
            .iter()
            .enumerate()
            .fold((0, -1.0), |(bi, be), (i, p)| if p.error > be { (i, p.error) } else { (bi, be) });
        let p = panels.swap_remove(idx);
        let m = 0.5 * (p.a + p.b);
        if m <= p.a || m >= p.b {
            // Panel cannot be split further in floating point.
            panels.push(Panel { error: 0.0, ..p });
            continue;
        }
        let (v1, e1) = gk15(&mut f, p.a, m);
        let (v2, e2) = gk15(&mut f, m, p.b);
        evaluations += 30;
        panels.push(Panel { a: p.a, b: m, value: v1, error: e1 });
        panels.push(Panel { a: m, b: p.b, value: v2, error: e2 });
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..(n + 1) / 2 {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp;
        loop {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 1..=n {
                let jf = j as f64;
                let p3 = p2;
                p2 = p1;
                p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
            }
            dp = nf * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// Composite Simpson weights for `n` equal intervals of width `dt`
/// (n + 1 samples). An odd interval count closes with Simpson's 3/8 rule.
pub fn simpson_weights(n: usize, dt: f64) -> Vec<f64> {
    let mut w = vec![0.0; n + 1];
    match n {
        0 => return w,
        1 => {
            w[0] = 0.5 * dt;
            w[1] = 0.5 * dt;
            return w;
        }
        _ => {}
    }
    let (even, tail) = if n % 2 == 0 { (n, 0) } else { (n - 3, 3) };
    for i in (0..even).step_by(2) {
        w[i] += dt / 3.0;
        w[i + 1] += 4.0 * dt / 3.0;
        w[i + 2] += dt / 3.0;
    }
    if tail == 3 {
        let s = even;
        w[s] += 3.0 * dt / 8.0;
        w[s + 1] += 9.0 * dt / 8.0;
        w[s + 2] += 9.0 * dt / 8.0;
        w[s + 3] += 3.0 * dt / 8.0;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gk_integrates_smooth_functions() {
        let est = integrate(|x: f64| x.exp(), &[0.0, 1.0], &AdaptiveOptions::default());
        assert!((est.value - (1f64.exp() - 1.0)).abs() < 1e-14);
        assert!(est.converged);
    }

    #[test]
    fn gk_adapts_to_endpoint_singularity() {
        let opts = AdaptiveOptions { rel_tol: 1e-10, ..Default::default() };
        let est = integrate(|x: f64| x.sqrt(), &[0.0, 1.0], &opts);
        assert!((est.value - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        for n in [1, 2, 5, 8, 13] {
            let (x, w) = gauss_legendre(n);
            for deg in 0..(2 * n) {
                let q: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(deg as i32)).sum();
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-13, "n={n} deg={deg}");
            }
        }
    }

    #[test]
    fn simpson_is_exact_for_cubics() {
        for n in 2..9 {
            let dt = 0.3;
            let w = simpson_weights(n, dt);
            let q: f64 = w.iter().enumerate().map(|(i, wi)| wi * (i as f64 * dt).powi(3)).sum();
            let t = n as f64 * dt;
            assert!((q - t.powi(4) / 4.0).abs() < 1e-12, "n={n}");
        }
    }
}
