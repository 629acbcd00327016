//! Point cloud containers, per-shape normalization, sampling primitives and
//! geometric distortion metrics.

mod metrics;
mod ply;
mod sampling;

pub use metrics::{chamfer_distance, d1_psnr, directional_mse, PSNR_CAP_DB};
pub use ply::{load_pointcloud, parse_ply, save_pointcloud, write_ply};
pub use sampling::{farthest_point_sample, knn};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// A set of 3D points with an optional class label.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    label: Option<u32>,
}

impl PointCloud {
    /// Builds a cloud, rejecting empty input and non-finite coordinates.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if let Some(i) = points
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            points,
            label: None,
        })
    }

    pub fn with_label(mut self, label: Option<u32>) -> Self {
        self.label = label;
        self
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn label(&self) -> Option<u32> {
        self.label
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    /// Row-major `N*3` buffer in single precision, the model's input layout.
    pub fn flat_f32(&self) -> Vec<f32> {
        self.points
            .iter()
            .flat_map(|p| p.iter().map(|&c| c as f32))
            .collect()
    }

    pub fn from_flat(flat: &[f32]) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return Err(Error::shape(format!(
                "flat buffer length {} is not a multiple of 3",
                flat.len()
            )));
        }
        Self::new(
            flat.chunks_exact(3)
                .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
                .collect(),
        )
    }

    /// Keeps the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let points = indices
            .iter()
            .map(|&i| {
                self.points
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(points)?.with_label(self.label))
    }

    pub fn max_norm(&self) -> f64 {
        self.points
            .iter()
            .map(norm)
            .fold(0.0, f64::max)
    }
}

/// Per-shape centering and scaling transmitted alongside the latents.
#[derive(Debug, Clone, Copy, PartialEq)]
///
/// Both fields are kept exactly representable in `f32`, the precision they
/// travel with in the container header.
pub struct NormalizationParams {
    pub center: [f64; 3],
    pub scale: f64,
}

impl NormalizationParams {
    pub const IDENTITY: Self = Self {
        center: [0.0; 3],
        scale: 1.0,
    };
}

fn norm(p: &Point) -> f64 {
    p.iter().map(|&c| c * c).sum::<f64>().sqrt()
}

/// Centers on the centroid and scales by the largest radius so the result
/// fits in the unit ball.
pub fn normalize(pc: &PointCloud) -> Result<(PointCloud, NormalizationParams)> {
    let n = pc.len() as f64;
    let mut centroid = [0f64; 3];
    for p in pc.points() {
        for (acc, &c) in centroid.iter_mut().zip(p) {
            *acc += c;
        }
    }
    let center = centroid.map(|c| (c / n) as f32 as f64);
    let radius = pc
        .points()
        .iter()
        .map(|p| norm(&[p[0] - center[0], p[1] - center[1], p[2] - center[2]]))
        .fold(0.0, f64::max);
    let scale = if radius < 1e-12 { 1.0 } else { radius as f32 as f64 };
    let params = NormalizationParams { center, scale };
    let points = pc
        .points()
        .iter()
        .map(|p| std::array::from_fn(|d| (p[d] - center[d]) / scale))
        .collect();
    Ok((PointCloud::new(points)?.with_label(pc.label()), params))
}

/// Inverse of [`normalize`]: `p * scale + center`.
pub fn denormalize(pc: &PointCloud, params: &NormalizationParams) -> Result<PointCloud> {
    if !(params.scale > 0.0) || !params.scale.is_finite() {
        return Err(Error::invalid(format!(
            "normalization scale must be positive, got {}",
            params.scale
        )));
    }
    let points = pc
        .points()
        .iter()
        .map(|p| std::array::from_fn(|d| p[d] * params.scale + params.center[d]))
        .collect();
    Ok(PointCloud::new(points)?.with_label(pc.label()))
}
