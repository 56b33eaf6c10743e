//! Randomized scene generation per task kind.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::{reach_point, Scene, SceneBox, TaskKind, TaskSpec, WorldParams};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};

const POSITION_TOLERANCE: f64 = 0.03;
/// Margin kept between sampled entities and the workspace walls.
const WALL_MARGIN: f64 = 0.08;
/// Minimum center separation between distinct tabletop objects.
const SEPARATION: f64 = 0.22;

/// Sample a feasible scene plus its task spec.
pub fn sample_scene(
    kind: TaskKind,
    params: &WorldParams,
    rng: &mut ChaCha12Rng,
) -> Result<(Scene, TaskSpec)> {
    for _ in 0..200 {
        if let Some(out) = try_sample(kind, params, rng) {
            return Ok(out);
        }
    }
    Err(Error::Infeasible(format!(
        "could not sample a feasible {} scene",
        kind.as_str()
    )))
}

fn try_sample(
    kind: TaskKind,
    params: &WorldParams,
    rng: &mut ChaCha12Rng,
) -> Option<(Scene, TaskSpec)> {
    let ws = params.workspace;
    let min = ws.min_corner;
    let max = ws.max_corner;

    let gripper_start = Vec3::new(
        rng.gen_range(-0.05..0.05),
        min.y + WALL_MARGIN + rng.gen_range(0.0..0.05),
        rng.gen_range(0.2..0.3),
    );

    let tabletop = |rng: &mut ChaCha12Rng, y_lo: f64| -> (Vec3, Vec3) {
        let he = Vec3::new(
            rng.gen_range(0.015..0.028),
            rng.gen_range(0.015..0.028),
            rng.gen_range(0.015..0.028),
        );
        let pos = Vec3::new(
            rng.gen_range(min.x + WALL_MARGIN..max.x - WALL_MARGIN),
            rng.gen_range(y_lo..max.y - WALL_MARGIN),
            he.z,
        );
        (pos, he)
    };

    let scene_with = |objects: Vec<SceneBox>, obstacles: Vec<SceneBox>| Scene {
        gripper: Pose::translation(gripper_start),
        gripper_open: true,
        objects,
        obstacles,
        workspace: ws,
        attachment: None,
        collided: false,
    };

    match kind {
        TaskKind::Reach => {
            // Target plus a distractor the guidance must disambiguate.
            let (tp, the) = tabletop(rng, 0.0);
            let (dp, dhe) = tabletop(rng, 0.0);
            if (tp - dp).norm() < SEPARATION {
                return None;
            }
            let objects = vec![
                SceneBox {
                    pose: Pose::translation(tp),
                    half_extents: the,
                },
                SceneBox {
                    pose: Pose::translation(dp),
                    half_extents: dhe,
                },
            ];
            Some((
                scene_with(objects, vec![]),
                TaskSpec {
                    kind,
                    target_object: 0,
                    place_object: None,
                    tolerance: POSITION_TOLERANCE,
                    horizon: 140,
                },
            ))
        }
        TaskKind::ObstacleReach => {
            let (tp, the) = tabletop(rng, 0.08);
            let target = SceneBox {
                pose: Pose::translation(tp),
                half_extents: the,
            };
            // A wall across the straight line from the start to the
            // target.
            let goal = reach_point(&target);
            let mid = (gripper_start + goal) * 0.5;
            let wall_he = Vec3::new(
                rng.gen_range(0.05..0.09),
                rng.gen_range(0.015..0.025),
                rng.gen_range(0.05..0.09),
            );
            let wall_center = Vec3::new(
                mid.x + rng.gen_range(-0.02..0.02),
                mid.y,
                wall_he.z,
            );
            let wall = SceneBox {
                pose: Pose::translation(wall_center),
                half_extents: wall_he,
            };
            // The wall must not swallow the start, the target, or the
            // detour corridor above it.
            if wall.contains(gripper_start) || wall.contains(goal) {
                return None;
            }
            if (wall_center - tp).norm() < 0.09 {
                return None;
            }
            if wall_center.z + wall_he.z + params.clearance + 0.03
                > ws.max_corner.z
            {
                return None;
            }
            Some((
                scene_with(vec![target], vec![wall]),
                TaskSpec {
                    kind,
                    target_object: 0,
                    place_object: None,
                    tolerance: POSITION_TOLERANCE,
                    horizon: 200,
                },
            ))
        }
        TaskKind::PickPlace => {
            let (ap, ahe) = tabletop(rng, 0.0);
            // Flat pad to deposit onto.
            let pad_he = Vec3::new(0.032, 0.032, 0.008);
            let pad_pos = Vec3::new(
                rng.gen_range(min.x + WALL_MARGIN..max.x - WALL_MARGIN),
                rng.gen_range(0.0..max.y - WALL_MARGIN),
                pad_he.z,
            );
            if (ap - pad_pos).norm() < SEPARATION {
                return None;
            }
            let objects = vec![
                SceneBox {
                    pose: Pose::translation(ap),
                    half_extents: ahe,
                },
                SceneBox {
                    pose: Pose::translation(pad_pos),
                    half_extents: pad_he,
                },
            ];
            Some((
                scene_with(objects, vec![]),
                TaskSpec {
                    kind,
                    target_object: 0,
                    place_object: Some(1),
                    tolerance: POSITION_TOLERANCE,
                    horizon: 260,
                },
            ))
        }
        TaskKind::Stack => {
            let (ap, ahe) = tabletop(rng, 0.0);
            let (bp, bhe) = tabletop(rng, 0.0);
            if (ap - bp).norm() < SEPARATION {
                return None;
            }
            let objects = vec![
                SceneBox {
                    pose: Pose::translation(ap),
                    half_extents: ahe,
                },
                SceneBox {
                    pose: Pose::translation(bp),
                    half_extents: bhe,
                },
            ];
            Some((
                scene_with(objects, vec![]),
                TaskSpec {
                    kind,
                    target_object: 0,
                    place_object: Some(1),
                    tolerance: POSITION_TOLERANCE,
                    horizon: 260,
                },
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::CropBox;
    use crate::seed::derive_rng;

    fn params() -> WorldParams {
        WorldParams {
            workspace: CropBox::new(Vec3::new(-0.35, -0.35, 0.0), Vec3::new(0.35, 0.35, 0.45))
                .unwrap(),
            timestep: 0.05,
            max_speed: 0.5,
            max_angular_speed: 2.0,
            attach_distance: 0.02,
            clearance: 0.05,
            cloud_points: 64,
        }
    }

    #[test]
    fn sampled_scenes_are_inside_the_workspace() {
        let p = params();
        for (i, kind) in [
            TaskKind::Reach,
            TaskKind::PickPlace,
            TaskKind::Stack,
            TaskKind::ObstacleReach,
        ]
        .iter()
        .enumerate()
        {
            for trial in 0..20 {
                let mut rng = derive_rng(90, "scene", (i * 100 + trial) as u64);
                let (scene, task) = sample_scene(*kind, &p, &mut rng).unwrap();
                task.validate().unwrap();
                for b in scene.objects.iter().chain(&scene.obstacles) {
                    assert!(p.workspace.contains(b.pose.position), "{kind:?}");
                }
                assert!(p.workspace.contains(scene.gripper.position));
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_under_seed() {
        let p = params();
        let a = sample_scene(TaskKind::Reach, &p, &mut derive_rng(91, "s", 7)).unwrap();
        let b = sample_scene(TaskKind::Reach, &p, &mut derive_rng(91, "s", 7)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
