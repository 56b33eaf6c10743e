//! Desk-scale kinematic world: scenes of boxes, a point gripper with
//! speed limits and rigid attachment, task predicates, a scripted
//! demonstration expert, a waypoint oracle standing in for the
//! high-level planner, observation rendering, and the evaluation
//! harness.

mod render;
mod runner;
mod sample;
mod script;

pub use render::render_cloud;
pub use runner::{
    run_episode, Controller, EpisodeOptions, ExpertController, GuidanceMode, HoldController,
    Observation, OutcomeRecord, ReplayController, SplineFollowController,
};
pub use sample::sample_scene;
pub use script::{scripted_expert, waypoint_oracle, DemoStep, Demonstration, OracleGuidance};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diffusion::{action_gripper, action_orientation, action_position, Action};
use crate::error::{Error, Result};
use crate::geometry::{quat_slerp, Pose, Vec3};
use crate::pointcloud::CropBox;

/// Height of the reach point above a target object's top face.
pub const REACH_HOVER: f64 = 0.01;

/// Task taxonomy, ordered roughly by horizon length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Reach,
    PickPlace,
    Stack,
    ObstacleReach,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<TaskKind> {
        match s {
            "reach" => Ok(TaskKind::Reach),
            "pick_place" => Ok(TaskKind::PickPlace),
            "stack" => Ok(TaskKind::Stack),
            "obstacle_reach" => Ok(TaskKind::ObstacleReach),
            other => Err(Error::Validation(format!("unknown task kind {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Reach => "reach",
            TaskKind::PickPlace => "pick_place",
            TaskKind::Stack => "stack",
            TaskKind::ObstacleReach => "obstacle_reach",
        }
    }
}

/// A task instance: what to act on and when the episode counts as a
/// success.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Index of the target object in `Scene::objects`.
    pub target_object: usize,
    /// Index of the place/stack base object, for the placing tasks.
    pub place_object: Option<usize>,
    /// Position tolerance of the success predicate, meters.
    pub tolerance: f64,
    /// Step budget before the episode fails.
    pub horizon: usize,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tolerance <= 0.0 {
            return Err(Error::validation("task tolerance must be positive"));
        }
        if self.horizon == 0 {
            return Err(Error::validation("task horizon must be >= 1"));
        }
        Ok(())
    }
}

/// An axis-aligned-in-its-own-frame box with a pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub pose: Pose,
    pub half_extents: Vec3,
}

impl SceneBox {
    /// Closed containment test in the box's own frame.
    pub fn contains(&self, p: Vec3) -> bool {
        let q = self.pose.inverse().transform_point(p);
        q.x.abs() <= self.half_extents.x
            && q.y.abs() <= self.half_extents.y
            && q.z.abs() <= self.half_extents.z
    }

    pub fn surface_area(&self) -> f64 {
        let h = self.half_extents;
        8.0 * (h.x * h.y + h.y * h.z + h.z * h.x)
    }

    /// Does the segment from `a` to `b` pass through the box?
    /// Slab test in the box frame, exact for a point gripper.
    pub fn segment_intersects(&self, a: Vec3, b: Vec3) -> bool {
        let inv = self.pose.inverse();
        let p0 = inv.transform_point(a);
        let p1 = inv.transform_point(b);
        let d = p1 - p0;
        let mut t_min = 0.0f64;
        let mut t_max = 1.0f64;
        for axis in 0..3 {
            let (o, dir, h) = match axis {
                0 => (p0.x, d.x, self.half_extents.x),
                1 => (p0.y, d.y, self.half_extents.y),
                _ => (p0.z, d.z, self.half_extents.z),
            };
            if dir.abs() < 1e-15 {
                if o.abs() > h {
                    return false;
                }
            } else {
                let mut t0 = (-h - o) / dir;
                let mut t1 = (h - o) / dir;
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                t_min = t_min.max(t0);
                t_max = t_max.min(t1);
                if t_min > t_max {
                    return false;
                }
            }
        }
        true
    }

    /// Oriented box overlap via the separating-axis test.
    pub fn overlaps(&self, other: &SceneBox) -> bool {
        let rel = self.pose.inverse().compose(&other.pose);
        let a = self.half_extents;
        let b = other.half_extents;
        // Columns of the relative rotation.
        let bx = rel.orientation.rotate(Vec3::new(1.0, 0.0, 0.0));
        let by = rel.orientation.rotate(Vec3::new(0.0, 1.0, 0.0));
        let bz = rel.orientation.rotate(Vec3::new(0.0, 0.0, 1.0));
        let t = rel.position;
        let axes_a = [
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        ];
        let axes_b = [bx, by, bz];
        let mut axes: Vec<Vec3> = Vec::with_capacity(15);
        axes.extend_from_slice(&axes_a);
        axes.extend_from_slice(&axes_b);
        for ax in &axes_a {
            for bxs in &axes_b {
                let c = ax.cross(*bxs);
                if c.norm() > 1e-12 {
                    axes.push(c);
                }
            }
        }
        for axis in axes {
            let axis = axis.normalized();
            let ra = a.x * axis.x.abs() + a.y * axis.y.abs() + a.z * axis.z.abs();
            let rb = b.x * axis.dot(bx).abs() + b.y * axis.dot(by).abs() + b.z * axis.dot(bz).abs();
            if t.dot(axis).abs() > ra + rb {
                return false;
            }
        }
        true
    }
}

/// Rigid grip: the held object's pose relative to the gripper.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub object: usize,
    pub grip_to_object: Pose,
}

/// Full world state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub gripper: Pose,
    pub gripper_open: bool,
    pub objects: Vec<SceneBox>,
    pub obstacles: Vec<SceneBox>,
    pub workspace: CropBox,
    pub attachment: Option<Attachment>,
    /// Latched when the gripper or held object penetrates an obstacle.
    pub collided: bool,
}

impl Scene {
    pub fn proprio(&self) -> crate::expert::ProprioState {
        crate::expert::ProprioState {
            joint_positions: Vec::new(),
            ee_pose: self.gripper,
            gripper_state: if self.gripper_open { 1.0 } else { 0.0 },
        }
    }
}

/// Kinematic limits and observation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldParams {
    pub workspace: CropBox,
    pub timestep: f64,
    pub max_speed: f64,
    pub max_angular_speed: f64,
    pub attach_distance: f64,
    pub clearance: f64,
    pub cloud_points: usize,
}

impl WorldParams {
    pub fn from_config(cfg: &RunConfig) -> Result<WorldParams> {
        Ok(WorldParams {
            workspace: cfg.world.workspace()?,
            timestep: cfg.world.timestep,
            max_speed: cfg.world.max_speed,
            max_angular_speed: cfg.world.max_angular_speed,
            attach_distance: cfg.world.attach_distance,
            clearance: cfg.world.clearance,
            cloud_points: cfg.world.cloud_points,
        })
    }
}

/// Advance the world by one control step toward an absolute target.
///
/// Translation is clipped to `max_speed * dt` and rotation to
/// `max_angular_speed * dt`; a gripper command below 0.5 closes
/// (attaching the nearest object within reach), at or above 0.5 opens.
/// Obstacle penetration (including the swept gripper path) latches the
/// collision flag. Non-finite actions hold the current pose.
pub fn step(scene: &Scene, action: &Action, params: &WorldParams) -> Scene {
    let mut next = scene.clone();
    let finite = action.iter().all(|v| v.is_finite());
    let prev_pos = scene.gripper.position;

    if finite {
        // Clip translation.
        let target = action_position(action);
        let delta = target - prev_pos;
        let dist = delta.norm();
        let max_step = params.max_speed * params.timestep;
        let new_pos = if dist <= max_step {
            target
        } else {
            prev_pos + delta * (max_step / dist)
        };

        // Clip rotation.
        let raw_q = action_orientation(action);
        let new_q = if raw_q.norm() < 1e-9 || !raw_q.is_finite() {
            scene.gripper.orientation
        } else {
            let target_q = raw_q.normalized().canonicalized();
            let rel_angle = 2.0
                * scene
                    .gripper
                    .orientation
                    .dot(target_q)
                    .abs()
                    .clamp(-1.0, 1.0)
                    .acos();
            let max_angle = params.max_angular_speed * params.timestep;
            if rel_angle <= max_angle || rel_angle < 1e-12 {
                target_q
            } else {
                quat_slerp(
                    scene.gripper.orientation,
                    target_q,
                    max_angle / rel_angle,
                )
            }
        };
        next.gripper = Pose::from_parts(new_pos, new_q);
    }

    // Held object follows rigidly.
    if let Some(att) = next.attachment {
        next.objects[att.object].pose = next.gripper.compose(&att.grip_to_object);
    }

    // Gripper command.
    if finite {
        let want_closed = action_gripper(action) < 0.5;
        if want_closed && next.attachment.is_none() {
            let mut best: Option<(usize, f64)> = None;
            for (i, obj) in next.objects.iter().enumerate() {
                let d = (obj.pose.position - next.gripper.position).norm();
                if d <= params.attach_distance && best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            if let Some((i, _)) = best {
                next.attachment = Some(Attachment {
                    object: i,
                    grip_to_object: next.gripper.inverse().compose(&next.objects[i].pose),
                });
            }
        } else if !want_closed {
            next.attachment = None;
        }
        next.gripper_open = !want_closed;
    }

    // Collision against obstacles: swept gripper point, plus the held
    // object's box at its new pose.
    for obs in &next.obstacles {
        if obs.segment_intersects(prev_pos, next.gripper.position) {
            next.collided = true;
        }
    }
    if let Some(att) = next.attachment {
        let held = &next.objects[att.object];
        for obs in &next.obstacles {
            if held.overlaps(obs) {
                next.collided = true;
            }
        }
    }
    next
}

/// The point a reach-style task aims for: just above the target's top
/// face.
pub fn reach_point(target: &SceneBox) -> Vec3 {
    target.pose.position + Vec3::new(0.0, 0.0, target.half_extents.z + REACH_HOVER)
}

/// The pose a placed object should end at: resting on top of the base
/// object.
pub fn place_point(scene: &Scene, task: &TaskSpec) -> Option<Vec3> {
    let base = &scene.objects[task.place_object?];
    let carried = &scene.objects[task.target_object];
    Some(
        base.pose.position
            + Vec3::new(
                0.0,
                0.0,
                base.half_extents.z + carried.half_extents.z,
            ),
    )
}

/// Evaluate the task's success predicate on the current scene.
pub fn task_success(scene: &Scene, task: &TaskSpec) -> bool {
    if scene.collided {
        return false;
    }
    match task.kind {
        TaskKind::Reach | TaskKind::ObstacleReach => {
            let goal = reach_point(&scene.objects[task.target_object]);
            (scene.gripper.position - goal).norm() <= task.tolerance
        }
        TaskKind::PickPlace | TaskKind::Stack => {
            let Some(goal) = place_point(scene, task) else {
                return false;
            };
            let obj = &scene.objects[task.target_object];
            scene.attachment.is_none()
                && scene.gripper_open
                && (obj.pose.position - goal).norm() <= task.tolerance
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::action_from_pose;
    use crate::geometry::Quat;

    fn params() -> WorldParams {
        WorldParams {
            workspace: CropBox::new(Vec3::new(-0.5, -0.5, 0.0), Vec3::new(0.5, 0.5, 0.5))
                .unwrap(),
            timestep: 0.05,
            max_speed: 0.5,
            max_angular_speed: 2.0,
            attach_distance: 0.02,
            clearance: 0.05,
            cloud_points: 64,
        }
    }

    fn base_scene() -> Scene {
        Scene {
            gripper: Pose::translation(Vec3::new(0.0, -0.2, 0.2)),
            gripper_open: true,
            objects: vec![SceneBox {
                pose: Pose::translation(Vec3::new(0.0, 0.1, 0.02)),
                half_extents: Vec3::new(0.02, 0.02, 0.02),
            }],
            obstacles: vec![],
            workspace: CropBox::new(Vec3::new(-0.5, -0.5, 0.0), Vec3::new(0.5, 0.5, 0.5))
                .unwrap(),
            attachment: None,
            collided: false,
        }
    }

    #[test]
    fn holding_current_pose_is_a_fixed_point() {
        let scene = base_scene();
        let action = action_from_pose(&scene.gripper, 1.0);
        let next = step(&scene, &action, &params());
        assert_eq!(next.gripper, scene.gripper);
        assert_eq!(next.objects, scene.objects);
        assert!(!next.collided);
    }

    #[test]
    fn motion_is_clipped_to_speed_limit() {
        let scene = base_scene();
        let far = Pose::translation(scene.gripper.position + Vec3::new(1.0, 0.0, 0.0));
        let next = step(&scene, &action_from_pose(&far, 1.0), &params());
        let moved = (next.gripper.position - scene.gripper.position).norm();
        assert!((moved - 0.025).abs() < 1e-12, "moved {moved}");
    }

    #[test]
    fn rotation_is_clipped_to_angular_limit() {
        let scene = base_scene();
        let target = Pose::from_parts(
            scene.gripper.position,
            Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), 1.0),
        );
        let next = step(&scene, &action_from_pose(&target, 1.0), &params());
        let angle = 2.0
            * next
                .gripper
                .orientation
                .dot(scene.gripper.orientation)
                .abs()
                .clamp(-1.0, 1.0)
                .acos();
        assert!((angle - 0.1).abs() < 1e-9, "angle {angle}");
    }

    #[test]
    fn close_near_object_attaches_and_carries() {
        let mut scene = base_scene();
        scene.gripper = Pose::translation(Vec3::new(0.0, 0.1, 0.03));
        // 1 cm from the object center.
        let close = action_from_pose(&scene.gripper, 0.0);
        let held = step(&scene, &close, &params());
        assert!(held.attachment.is_some());
        assert!(!held.gripper_open);

        // Move with the object attached: it follows rigidly.
        let up = Pose::translation(held.gripper.position + Vec3::new(0.0, 0.0, 0.02));
        let moved = step(&held, &action_from_pose(&up, 0.0), &params());
        let rel_before = held.gripper.inverse().compose(&held.objects[0].pose);
        let rel_after = moved.gripper.inverse().compose(&moved.objects[0].pose);
        assert!((rel_before.position - rel_after.position).norm() < 1e-12);

        // Opening releases.
        let released = step(&moved, &action_from_pose(&moved.gripper, 1.0), &params());
        assert!(released.attachment.is_none());
        assert!(released.gripper_open);
    }

    #[test]
    fn close_far_from_objects_does_not_attach() {
        let scene = base_scene();
        let next = step(&scene, &action_from_pose(&scene.gripper, 0.0), &params());
        assert!(next.attachment.is_none());
        assert!(!next.gripper_open);
    }

    #[test]
    fn obstacle_penetration_sets_collision_flag() {
        let mut scene = base_scene();
        scene.obstacles.push(SceneBox {
            pose: Pose::translation(Vec3::new(0.0, -0.1, 0.2)),
            half_extents: Vec3::new(0.05, 0.01, 0.05),
        });
        // Command straight through the thin wall.
        let through = Pose::translation(Vec3::new(0.0, -0.08, 0.2));
        let mut s = scene.clone();
        for _ in 0..10 {
            s = step(&s, &action_from_pose(&through, 1.0), &params());
        }
        assert!(s.collided);
    }

    #[test]
    fn swept_segment_catches_tunneling() {
        let b = SceneBox {
            pose: Pose::translation(Vec3::new(0.0, 0.0, 0.0)),
            half_extents: Vec3::new(0.1, 0.001, 0.1),
        };
        // Endpoints on both sides of a paper-thin wall.
        assert!(b.segment_intersects(Vec3::new(0.0, -0.01, 0.0), Vec3::new(0.0, 0.01, 0.0)));
        assert!(!b.segment_intersects(Vec3::new(0.2, -0.01, 0.0), Vec3::new(0.2, 0.01, 0.0)));
    }

    #[test]
    fn obb_overlap_matches_obvious_cases() {
        let a = SceneBox {
            pose: Pose::translation(Vec3::ZERO),
            half_extents: Vec3::new(0.1, 0.1, 0.1),
        };
        let b = SceneBox {
            pose: Pose::translation(Vec3::new(0.15, 0.0, 0.0)),
            half_extents: Vec3::new(0.1, 0.1, 0.1),
        };
        let c = SceneBox {
            pose: Pose::translation(Vec3::new(0.25, 0.0, 0.0)),
            half_extents: Vec3::new(0.04, 0.04, 0.04),
        };
        assert!(a.overlaps(&b));
        assert!(!a.overlaps(&c));
        // Rotated case.
        let d = SceneBox {
            pose: Pose::from_parts(
                Vec3::new(0.0, 0.0, 0.25),
                Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_4),
            ),
            half_extents: Vec3::new(0.2, 0.01, 0.01),
        };
        let e = SceneBox {
            pose: Pose::translation(Vec3::new(0.1, 0.1, 0.25)),
            half_extents: Vec3::new(0.02, 0.02, 0.02),
        };
        assert!(d.overlaps(&e));
    }

    #[test]
    fn non_finite_action_holds_pose() {
        let scene = base_scene();
        let mut action = action_from_pose(&scene.gripper, 1.0);
        action[0] = f64::NAN;
        let next = step(&scene, &action, &params());
        assert_eq!(next.gripper, scene.gripper);
    }

    #[test]
    fn reach_predicate_tolerance() {
        let mut scene = base_scene();
        let task = TaskSpec {
            kind: TaskKind::Reach,
            target_object: 0,
            place_object: None,
            tolerance: 0.03,
            horizon: 100,
        };
        assert!(!task_success(&scene, &task));
        scene.gripper = Pose::translation(reach_point(&scene.objects[0]));
        assert!(task_success(&scene, &task));
        scene.collided = true;
        assert!(!task_success(&scene, &task));
    }
}
