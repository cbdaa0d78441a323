//! Balls, ellipsoids and unions of balls used for the source ball B and the
//! inclusion D.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::Point3;

/// Ball with center `p` and radius `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallSpec {
    pub center: [f64; 3],
    pub radius: f64,
}

impl BallSpec {
    /// A ball whose closure lies strictly in the upper half-space.
    pub fn new(center: Point3, radius: f64) -> Result<Self> {
        let b = Self { center: center.into(), radius };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return domain(format!("ball radius must be positive, got {}", self.radius));
        }
        if !(self.center[2] - self.radius > 0.0) {
            return domain("source ball must lie strictly in the upper half-space");
        }
        Ok(())
    }

    pub fn p(&self) -> Point3 {
        Vector3::from(self.center)
    }

    pub fn contains(&self, x: &Point3) -> bool {
        (x - self.p()).norm() < self.radius
    }
}

/// Axis-aligned ellipsoid `{c + diag(a) u : |u| <= 1}`; balls are the case of
/// equal semi-axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: Point3,
    pub semi_axes: Vector3<f64>,
}

impl Ellipsoid {
    pub fn point(&self, u: &Vector3<f64>) -> Point3 {
        self.center + self.semi_axes.component_mul(u)
    }

    pub fn contains(&self, x: &Point3) -> bool {
        (x - self.center).component_div(&self.semi_axes).norm_squared() < 1.0
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.semi_axes.product()
    }
}

/// Geometry of the inclusion D.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Ball { center: [f64; 3], radius: f64 },
    Ellipsoid { center: [f64; 3], semi_axes: [f64; 3] },
    UnionOfBalls { centers: Vec<[f64; 3]>, radii: Vec<f64> },
}

impl Shape {
    /// The convex pieces making up the shape.
    pub fn pieces(&self) -> Vec<Ellipsoid> {
        match self {
            Shape::Ball { center, radius } => vec![Ellipsoid {
                center: Vector3::from(*center),
                semi_axes: Vector3::repeat(*radius),
            }],
            Shape::Ellipsoid { center, semi_axes } => vec![Ellipsoid {
                center: Vector3::from(*center),
                semi_axes: Vector3::from(*semi_axes),
            }],
            Shape::UnionOfBalls { centers, radii } => centers
                .iter()
                .zip(radii)
                .map(|(c, r)| Ellipsoid { center: Vector3::from(*c), semi_axes: Vector3::repeat(*r) })
                .collect(),
        }
    }

    /// Checks positivity of the dimensions and containment of the closure in
    /// the lower half-space.
    pub fn validate(&self) -> Result<()> {
        if let Shape::UnionOfBalls { centers, radii } = self {
            if centers.len() != radii.len() || centers.is_empty() {
                return domain("union of balls needs one radius per center and at least one ball");
            }
        }
        for e in self.pieces() {
            if e.semi_axes.iter().any(|a| !(*a > 0.0)) {
                return domain("inclusion dimensions must be positive");
            }
            if !(e.center.z + e.semi_axes.z < 0.0) {
                return domain("inclusion must lie strictly in the lower half-space");
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &Point3) -> bool {
        self.pieces().iter().any(|e| e.contains(x))
    }

    /// Axis-aligned bounding box (min corner, max corner).
    pub fn bounding_box(&self) -> (Point3, Point3) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for e in self.pieces() {
            lo = lo.inf(&(e.center - e.semi_axes));
            hi = hi.sup(&(e.center + e.semi_axes));
        }
        (lo, hi)
    }
}
