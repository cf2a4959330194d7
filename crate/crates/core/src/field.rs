//! Ground-truth light-intensity field: a random mixture of axis-aligned 2D
//! Gaussians on the unit square, normalized so values land in [0, 1].

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Grid resolution (per axis) used to locate the mixture peak.
const PEAK_GRID: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("query point ({0}, {1}) lies outside the unit square")]
    OutOfDomain(f64, f64),
}

/// One axis-aligned Gaussian component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBlob {
    /// Center in [0,1]^2.
    pub center: [f64; 2],
    /// Per-axis standard deviation, as a fraction of the unit square.
    pub stddev: [f64; 2],
    /// Mixture weight.
    pub weight: f64,
}

impl GaussianBlob {
    fn eval(&self, p: [f64; 2]) -> f64 {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let ex = dx * dx / (2.0 * self.stddev[0] * self.stddev[0]);
        let ey = dy * dy / (2.0 * self.stddev[1] * self.stddev[1]);
        self.weight * (-(ex + ey)).exp()
    }
}

/// Scalar intensity field on the unit square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityField {
    pub blobs: Vec<GaussianBlob>,
    /// Maximum of the raw mixture over a dense grid; normalization constant.
    pub peak: f64,
}

/// Builds a random field: 8..=12 blobs with uniform centers, per-axis
/// stddev in [0.05, 0.25] and weight in [0.5, 1.0]. Deterministic in `seed`.
pub fn make_field(seed: u64) -> IntensityField {
    let mut rng = seed::rng_from(seed);
    let n_blobs: usize = rng.gen_range(8..=12);
    let blobs: Vec<GaussianBlob> = (0..n_blobs)
        .map(|_| GaussianBlob {
            center: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
            stddev: [rng.gen_range(0.05..0.25), rng.gen_range(0.05..0.25)],
            weight: rng.gen_range(0.5..1.0),
        })
        .collect();
    let peak = grid_peak(&blobs);
    IntensityField { blobs, peak }
}

fn raw_mixture(blobs: &[GaussianBlob], p: [f64; 2]) -> f64 {
    blobs.iter().map(|b| b.eval(p)).sum()
}

fn grid_peak(blobs: &[GaussianBlob]) -> f64 {
    let mut peak = 0.0f64;
    for i in 0..PEAK_GRID {
        let x = i as f64 / (PEAK_GRID - 1) as f64;
        for j in 0..PEAK_GRID {
            let y = j as f64 / (PEAK_GRID - 1) as f64;
            peak = peak.max(raw_mixture(blobs, [x, y]));
        }
    }
    peak
}

/// Peak-normalized intensity at `p`, clamped to [0, 1].
///
/// The peak is located on a finite grid, so off-grid points can exceed it
/// slightly; clamping keeps every observation a valid GP target.
pub fn sample_field(field: &IntensityField, p: [f64; 2]) -> Result<f64, FieldError> {
    if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
        return Err(FieldError::OutOfDomain(p[0], p[1]));
    }
    Ok((raw_mixture(&field.blobs, p) / field.peak).clamp(0.0, 1.0))
}
