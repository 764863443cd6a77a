//! Synthetic point clouds with exact signed distance functions.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::pointcloud::Point3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("invalid shape parameter: {0}")]
    Parameter(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Two equal spheres on the x axis whose surfaces are `gap` apart.
    TwoSpheres { radius: f64, gap: f64 },
    /// Ring around the z axis.
    Torus { major: f64, minor: f64 },
    /// Axis-aligned box; `half_extents[2]` is half the thickness.
    ThinPlate { half_extents: [f64; 3] },
}

impl Shape {
    pub fn two_spheres() -> Self {
        Shape::TwoSpheres { radius: 0.375, gap: 0.3 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Sphere { .. } => "sphere",
            Shape::TwoSpheres { .. } => "two_spheres",
            Shape::Torus { .. } => "torus",
            Shape::ThinPlate { .. } => "thin_plate",
        }
    }

    pub fn validate(&self) -> Result<(), ShapeError> {
        let ok = match *self {
            Shape::Sphere { radius } => radius > 0.0,
            Shape::TwoSpheres { radius, gap } => radius > 0.0 && gap >= 0.0,
            Shape::Torus { major, minor } => minor > 0.0 && major > minor,
            Shape::ThinPlate { half_extents } => half_extents.iter().all(|&h| h > 0.0),
        };
        if ok && self.finite() {
            Ok(())
        } else {
            Err(ShapeError::Parameter(format!("{self:?}")))
        }
    }

    fn finite(&self) -> bool {
        match *self {
            Shape::Sphere { radius } => radius.is_finite(),
            Shape::TwoSpheres { radius, gap } => radius.is_finite() && gap.is_finite(),
            Shape::Torus { major, minor } => major.is_finite() && minor.is_finite(),
            Shape::ThinPlate { half_extents } => half_extents.iter().all(|h| h.is_finite()),
        }
    }

    /// Centres of the two spheres.
    fn sphere_centers(radius: f64, gap: f64) -> [Point3; 2] {
        let c = radius + gap / 2.0;
        [[-c, 0.0, 0.0], [c, 0.0, 0.0]]
    }

    /// Exact signed distance, negative inside.
    pub fn sdf(&self, p: &Point3) -> f64 {
        let norm = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        match *self {
            Shape::Sphere { radius } => norm(*p) - radius,
            Shape::TwoSpheres { radius, gap } => Self::sphere_centers(radius, gap)
                .iter()
                .map(|c| norm([p[0] - c[0], p[1] - c[1], p[2] - c[2]]) - radius)
                .fold(f64::INFINITY, f64::min),
            Shape::Torus { major, minor } => {
                let q = (p[0] * p[0] + p[1] * p[1]).sqrt() - major;
                (q * q + p[2] * p[2]).sqrt() - minor
            }
            Shape::ThinPlate { half_extents } => {
                let d = [
                    p[0].abs() - half_extents[0],
                    p[1].abs() - half_extents[1],
                    p[2].abs() - half_extents[2],
                ];
                let outside = norm([d[0].max(0.0), d[1].max(0.0), d[2].max(0.0)]);
                let inside = d[0].max(d[1]).max(d[2]).min(0.0);
                outside + inside
            }
        }
    }

    pub fn surface_area(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => 4.0 * PI * radius * radius,
            Shape::TwoSpheres { radius, .. } => 8.0 * PI * radius * radius,
            Shape::Torus { major, minor } => 4.0 * PI * PI * major * minor,
            Shape::ThinPlate { half_extents: [a, b, c] } => 8.0 * (a * b + b * c + a * c),
        }
    }

    /// One area-uniform surface sample.
    pub fn sample_surface(&self, rng: &mut impl Rng) -> Point3 {
        match *self {
            Shape::Sphere { radius } => scale(unit_direction(rng), radius),
            Shape::TwoSpheres { radius, gap } => {
                let c = Self::sphere_centers(radius, gap)[rng.gen_range(0..2)];
                let d = scale(unit_direction(rng), radius);
                [c[0] + d[0], c[1] + d[1], c[2] + d[2]]
            }
            Shape::Torus { major, minor } => loop {
                // The area element is proportional to R + r·cos v.
                let u = rng.gen_range(0.0..2.0 * PI);
                let v = rng.gen_range(0.0..2.0 * PI);
                let accept: f64 = rng.gen_range(0.0..1.0);
                if accept * (major + minor) <= major + minor * v.cos() {
                    let ring = major + minor * v.cos();
                    break [ring * u.cos(), ring * u.sin(), minor * v.sin()];
                }
            },
            Shape::ThinPlate { half_extents: h } => {
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.gen_range(0.0..total);
                let mut axis = 2;
                for (k, a) in areas.iter().enumerate() {
                    if pick < *a {
                        axis = k;
                        break;
                    }
                    pick -= a;
                }
                let mut p = [0.0; 3];
                for k in 0..3 {
                    p[k] = rng.gen_range(-h[k]..h[k]);
                }
                p[axis] = if rng.gen_bool(0.5) { h[axis] } else { -h[axis] };
                p
            }
        }
    }
}

fn scale(p: Point3, s: f64) -> Point3 {
    [p[0] * s, p[1] * s, p[2] * s]
}

fn unit_direction(rng: &mut impl Rng) -> Point3 {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return scale(v, 1.0 / n);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeSpec {
    pub shape: Shape,
    pub count: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl ShapeSpec {
    pub fn new(shape: Shape, count: usize, seed: u64) -> Self {
        Self {
            shape,
            count,
            noise_std: 0.0,
            seed,
        }
    }
}

/// Surface samples with optional isotropic Gaussian noise.
pub fn generate(spec: &ShapeSpec) -> Result<Vec<Point3>, ShapeError> {
    spec.shape.validate()?;
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(ShapeError::Parameter(format!("noise_std {}", spec.noise_std)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(1);
    Ok((0..spec.count)
        .map(|_| {
            let mut p = spec.shape.sample_surface(&mut rng);
            if spec.noise_std > 0.0 {
                for c in p.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut noise_rng);
                    *c += spec.noise_std * e;
                }
            }
            p
        })
        .collect())
}

pub fn analytic_sdf(spec: &ShapeSpec, p: &Point3) -> f64 {
    spec.shape.sdf(p)
}
