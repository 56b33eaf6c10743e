//! Synthetic point-cloud rendering: uniform surface samples of the
//! scene's boxes, cropped to the workspace and downsampled.

use rand::Rng;

use super::{Scene, SceneBox};
use crate::error::Result;
use crate::geometry::Vec3;
use crate::pointcloud::{crop, farthest_point_sample, PointCloud};
use crate::seed::derive_rng;

/// Uniform surface samples of all object and obstacle boxes, cropped
/// to the workspace and farthest-point downsampled to `n` points.
///
/// Output coordinates are quantized to f32 (matching the on-disk cloud
/// format and a depth sensor's precision), so persisted clouds round
/// trip bit-exactly. An empty scene yields an empty, flagged cloud.
pub fn render_cloud(scene: &Scene, n: usize, seed: u64) -> Result<PointCloud> {
    let boxes: Vec<&SceneBox> = scene.objects.iter().chain(&scene.obstacles).collect();
    if boxes.is_empty() {
        let mut cloud = PointCloud::empty();
        cloud.empty_after_crop = true;
        return Ok(cloud);
    }

    let raw_total = (n * 4).max(256);
    let total_area: f64 = boxes.iter().map(|b| b.surface_area()).sum();
    let mut rng = derive_rng(seed, "surface", 0);
    let mut points = Vec::with_capacity(raw_total + boxes.len());
    for b in &boxes {
        let share =
            ((raw_total as f64) * b.surface_area() / total_area).ceil() as usize;
        for _ in 0..share.max(1) {
            points.push(sample_box_surface(b, &mut rng));
        }
    }

    // Sensor-style quantization.
    for p in &mut points {
        *p = Vec3::new(p.x as f32 as f64, p.y as f32 as f64, p.z as f32 as f64);
    }

    let cloud = PointCloud::new(points)?;
    let cropped = crop(&cloud, &scene.workspace);
    farthest_point_sample(&cropped, n, seed)
}

/// Uniform sample of a box surface: faces weighted by area, uniform in
/// the face rectangle.
fn sample_box_surface(b: &SceneBox, rng: &mut impl Rng) -> Vec3 {
    let h = b.half_extents;
    let areas = [
        h.y * h.z, // +x / -x (times 4, constant factor cancels)
        h.y * h.z,
        h.x * h.z,
        h.x * h.z,
        h.x * h.y,
        h.x * h.y,
    ];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut face = 0;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let u = rng.gen_range(-1.0..1.0);
    let v = rng.gen_range(-1.0..1.0);
    let local = match face {
        0 => Vec3::new(h.x, u * h.y, v * h.z),
        1 => Vec3::new(-h.x, u * h.y, v * h.z),
        2 => Vec3::new(u * h.x, h.y, v * h.z),
        3 => Vec3::new(u * h.x, -h.y, v * h.z),
        4 => Vec3::new(u * h.x, v * h.y, h.z),
        _ => Vec3::new(u * h.x, v * h.y, -h.z),
    };
    b.pose.transform_point(local)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use crate::pointcloud::CropBox;

    fn scene_with(objects: Vec<SceneBox>, obstacles: Vec<SceneBox>) -> Scene {
        Scene {
            gripper: Pose::translation(Vec3::new(0.0, 0.0, 0.3)),
            gripper_open: true,
            objects,
            obstacles,
            workspace: CropBox::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0))
                .unwrap(),
            attachment: None,
            collided: false,
        }
    }

    #[test]
    fn all_samples_lie_on_the_box_surface() {
        let b = SceneBox {
            pose: Pose::translation(Vec3::new(0.1, -0.2, 0.5)),
            half_extents: Vec3::new(0.5, 0.5, 0.5),
        };
        let scene = scene_with(vec![b], vec![]);
        let cloud = render_cloud(&scene, 256, 3).unwrap();
        for p in &cloud.points {
            let local = b.pose.inverse().transform_point(*p);
            let m = (local.x.abs() / b.half_extents.x)
                .max(local.y.abs() / b.half_extents.y)
                .max(local.z.abs() / b.half_extents.z);
            assert!((m - 1.0).abs() <= 1e-6, "point {p:?} off surface (m={m})");
        }
    }

    #[test]
    fn exact_point_count() {
        let b = SceneBox {
            pose: Pose::translation(Vec3::new(0.0, 0.0, 0.1)),
            half_extents: Vec3::new(0.05, 0.05, 0.05),
        };
        let scene = scene_with(vec![b], vec![]);
        let cloud = render_cloud(&scene, 512, 9).unwrap();
        assert_eq!(cloud.len(), 512);
    }

    #[test]
    fn empty_scene_is_flagged() {
        let scene = scene_with(vec![], vec![]);
        let cloud = render_cloud(&scene, 64, 1).unwrap();
        assert!(cloud.is_empty());
        assert!(cloud.empty_after_crop);
    }

    #[test]
    fn deterministic_under_seed() {
        let b = SceneBox {
            pose: Pose::translation(Vec3::new(0.0, 0.0, 0.1)),
            half_extents: Vec3::new(0.04, 0.06, 0.02),
        };
        let scene = scene_with(vec![b], vec![]);
        let a = render_cloud(&scene, 128, 77).unwrap();
        let c = render_cloud(&scene, 128, 77).unwrap();
        assert_eq!(a.points, c.points);
        let d = render_cloud(&scene, 128, 78).unwrap();
        assert_ne!(a.points, d.points);
    }

    #[test]
    fn two_disjoint_cubes_cluster_by_nearest_box() {
        let b1 = SceneBox {
            pose: Pose::translation(Vec3::new(-0.3, 0.0, 0.1)),
            half_extents: Vec3::new(0.05, 0.05, 0.05),
        };
        let b2 = SceneBox {
            pose: Pose::translation(Vec3::new(0.3, 0.0, 0.1)),
            half_extents: Vec3::new(0.05, 0.05, 0.05),
        };
        let scene = scene_with(vec![b1, b2], vec![]);
        let cloud = render_cloud(&scene, 256, 5).unwrap();
        let mut counts = [0usize; 2];
        for p in &cloud.points {
            // Brute-force nearest box by center distance; samples on a
            // cube are always nearer their own center here.
            let d1 = (*p - b1.pose.position).norm();
            let d2 = (*p - b2.pose.position).norm();
            let nearest = if d1 < d2 { 0 } else { 1 };
            // Verify against exact surface membership.
            let on1 = surface_distance(&b1, *p) < 1e-6;
            let on2 = surface_distance(&b2, *p) < 1e-6;
            assert!(on1 ^ on2, "point must lie on exactly one cube");
            assert_eq!(nearest, usize::from(on2));
            counts[nearest] += 1;
        }
        assert!(counts[0] > 0 && counts[1] > 0);
    }

    fn surface_distance(b: &SceneBox, p: Vec3) -> f64 {
        let local = b.pose.inverse().transform_point(p);
        let m = (local.x.abs() / b.half_extents.x)
            .max(local.y.abs() / b.half_extents.y)
            .max(local.z.abs() / b.half_extents.z);
        (m - 1.0).abs()
    }
}
