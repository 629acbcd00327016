//! Deterministic synthetic shapes for tests, demos and desk-scale runs.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::geometry::{Point, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Sphere,
    Cube,
    Torus,
    Cylinder,
    Cone,
    Ellipsoid,
    Disc,
    Saddle,
}

impl Shape {
    pub const ALL: [Shape; 8] = [
        Shape::Sphere,
        Shape::Cube,
        Shape::Torus,
        Shape::Cylinder,
        Shape::Cone,
        Shape::Ellipsoid,
        Shape::Disc,
        Shape::Saddle,
    ];

    fn sample(self, rng: &mut ChaCha8Rng) -> Point {
        match self {
            Shape::Sphere => unit_vector(rng),
            Shape::Ellipsoid => {
                let v = unit_vector(rng);
                [1.6 * v[0], 0.9 * v[1], 0.5 * v[2]]
            }
            Shape::Cube => {
                let face = rng.random_range(0..6usize);
                let mut p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0];
                p[2] = if face % 2 == 0 { 1.0 } else { -1.0 };
                let axis = face / 2;
                p.swap(2, axis);
                p
            }
            Shape::Torus => {
                let (u, v) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
                let r = 1.0 + 0.35 * v.cos();
                [r * u.cos(), r * u.sin(), 0.35 * v.sin()]
            }
            Shape::Cylinder => {
                let u = rng.random_range(0.0..TAU);
                [0.6 * u.cos(), 0.6 * u.sin(), rng.random_range(-1.0..1.0)]
            }
            Shape::Cone => {
                let u = rng.random_range(0.0..TAU);
                // Area-uniform along the slant.
                let h = rng.random::<f64>().sqrt();
                [h * u.cos(), h * u.sin(), 1.0 - 2.0 * h]
            }
            Shape::Disc => {
                let u = rng.random_range(0.0..TAU);
                let r = rng.random::<f64>().sqrt();
                [r * u.cos(), r * u.sin(), 0.05 * (3.0 * PI * r).sin()]
            }
            Shape::Saddle => {
                let (x, y) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                [x, y, 0.5 * (x * x - y * y)]
            }
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let v: Point = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return v.map(|c| c / n);
        }
    }
}

/// `n` surface samples of `shape`, labelled with its index in
/// [`Shape::ALL`].
pub fn shape_cloud(shape: Shape, n: usize, seed: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n).map(|_| shape.sample(&mut rng)).collect();
    let label = Shape::ALL.iter().position(|&s| s == shape).unwrap() as u32;
    Ok(PointCloud::new(points)?.with_label(Some(label)))
}

/// One cloud of every shape, each with `n` points.
pub fn shape_set(n: usize, seed: u64) -> Result<Vec<PointCloud>> {
    Shape::ALL
        .iter()
        .enumerate()
        .map(|(i, &s)| shape_cloud(s, n, seed.wrapping_add(i as u64)))
        .collect()
}
