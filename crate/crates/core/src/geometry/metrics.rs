use super::sampling::sq_dist;
use super::PointCloud;
use crate::error::{Error, Result};

/// PSNR reported for a zero geometric error.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Mean over `from` of the squared distance to the nearest point of `to`.
pub fn directional_mse(from: &PointCloud, to: &PointCloud) -> f64 {
    let total: f64 = from
        .points()
        .iter()
        .map(|p| {
            to.points()
                .iter()
                .map(|q| sq_dist(p, q))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / from.len() as f64
}

/// Symmetric Chamfer distance: the sum of both directional mean squared
/// nearest-neighbour distances.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer distance of an empty cloud"));
    }
    Ok(directional_mse(a, b) + directional_mse(b, a))
}

/// Point-to-point (D1) geometry PSNR using the worse of the two directions.
pub fn d1_psnr(a: &PointCloud, b: &PointCloud, peak: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("d1 psnr of an empty cloud"));
    }
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("psnr peak must be positive, got {peak}")));
    }
    let mse = directional_mse(a, b).max(directional_mse(b, a));
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}
