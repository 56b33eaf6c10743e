//! Point-cloud preprocessing: crop, farthest-point downsampling, and
//! workspace normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// An axis-aligned box in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub min_corner: Vec3,
    pub max_corner: Vec3,
}

impl CropBox {
    pub fn new(min_corner: Vec3, max_corner: Vec3) -> Result<CropBox> {
        if !(min_corner.is_finite() && max_corner.is_finite()) {
            return Err(Error::validation("crop box with non-finite corner"));
        }
        if min_corner.x >= max_corner.x
            || min_corner.y >= max_corner.y
            || min_corner.z >= max_corner.z
        {
            return Err(Error::validation("crop box min must be < max per axis"));
        }
        Ok(CropBox {
            min_corner,
            max_corner,
        })
    }

    /// Closed-box membership (boundary points included).
    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min_corner.x
            && p.x <= self.max_corner.x
            && p.y >= self.min_corner.y
            && p.y <= self.max_corner.y
            && p.z >= self.min_corner.z
            && p.z <= self.max_corner.z
    }

    pub fn center(&self) -> Vec3 {
        (self.min_corner + self.max_corner) * 0.5
    }

    /// Length of the box diagonal.
    pub fn diagonal(&self) -> f64 {
        (self.max_corner - self.min_corner).norm()
    }

    /// Largest per-axis extent.
    pub fn max_extent(&self) -> f64 {
        let e = self.max_corner - self.min_corner;
        e.x.max(e.y).max(e.z)
    }
}

/// The affine map applied by [`normalize_cloud`], kept so the mapping
/// can be inverted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: Vec3,
    pub scale: f64,
}

impl Normalization {
    pub fn for_workspace(workspace: &CropBox) -> Normalization {
        Normalization {
            center: workspace.center(),
            scale: 2.0 / workspace.max_extent(),
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        (p - self.center) * self.scale
    }

    pub fn invert(&self, p: Vec3) -> Vec3 {
        p * (1.0 / self.scale) + self.center
    }
}

/// A 3D point cloud in the robot base frame (or normalized units once
/// `normalization` is set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// Set when a crop produced no points.
    pub empty_after_crop: bool,
    /// Present once the cloud has been mapped to normalized units.
    pub normalization: Option<Normalization>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<PointCloud> {
        if let Some(bad) = points.iter().find(|p| !p.is_finite()) {
            return Err(Error::Validation(format!(
                "point cloud with non-finite point {bad:?}"
            )));
        }
        Ok(PointCloud {
            points,
            empty_after_crop: false,
            normalization: None,
        })
    }

    pub fn empty() -> PointCloud {
        PointCloud {
            points: Vec::new(),
            empty_after_crop: false,
            normalization: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Keep exactly the points inside the closed box, preserving order.
///
/// An empty result is legal and flagged on the returned cloud.
pub fn crop(cloud: &PointCloud, cbox: &CropBox) -> PointCloud {
    let points: Vec<Vec3> = cloud
        .points
        .iter()
        .copied()
        .filter(|p| cbox.contains(*p))
        .collect();
    let empty = points.is_empty();
    PointCloud {
        points,
        empty_after_crop: empty,
        normalization: cloud.normalization,
    }
}

/// Greedy farthest-point sampling from a seed-selected start index.
///
/// Returns all points unchanged when the cloud has at most `n` points.
/// Ties in the farthest-distance argmax keep the lowest index, so the
/// selection is fully determined by the start index.
pub fn farthest_point_sample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::validation("farthest-point sample size must be >= 1"));
    }
    if cloud.len() <= n {
        return Ok(cloud.clone());
    }
    let mut rng = crate::seed::derive_rng(seed, "fps-start", 0);
    let start = rng.gen_range(0..cloud.len());
    Ok(fps_from_start(cloud, n, start))
}

/// Farthest-point sampling with an explicit start index.
pub fn fps_from_start(cloud: &PointCloud, n: usize, start: usize) -> PointCloud {
    if cloud.len() <= n {
        return cloud.clone();
    }
    let pts = &cloud.points;
    let mut selected = Vec::with_capacity(n);
    let mut min_dist = vec![f64::INFINITY; pts.len()];
    let mut current = start;
    selected.push(pts[current]);
    for _ in 1..n {
        let cp = pts[current];
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let d = (*p - cp).dot(*p - cp);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] > best_d {
                best_d = min_dist[i];
                best = i;
            }
        }
        current = best;
        selected.push(pts[current]);
    }
    PointCloud {
        points: selected,
        empty_after_crop: cloud.empty_after_crop,
        normalization: cloud.normalization,
    }
}

/// Map the cloud into normalized units: workspace center to the
/// origin, largest workspace extent to a span of 2, so points lie in
/// (approximately) `[-1, 1]^3`. The map is recorded on the cloud and
/// invertible via [`Normalization::invert`].
pub fn normalize_cloud(cloud: &PointCloud, workspace: &CropBox) -> PointCloud {
    let norm = Normalization::for_workspace(workspace);
    PointCloud {
        points: cloud.points.iter().map(|&p| norm.apply(p)).collect(),
        empty_after_crop: cloud.empty_after_crop,
        normalization: Some(norm),
    }
}
