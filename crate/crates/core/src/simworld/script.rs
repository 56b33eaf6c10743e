//! Scripted demonstration expert and the waypoint oracle that stands
//! in for the high-level planner.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::{
    place_point, reach_point, render_cloud, step, task_success, Scene, TaskKind, TaskSpec,
    WorldParams,
};
use crate::diffusion::{action_from_pose, Action};
use crate::error::{Error, Result};
use crate::expert::ProprioState;
use crate::geometry::{Pose, Vec3};
use crate::pointcloud::PointCloud;
use crate::seed::derive_rng;
use crate::trajectory::{perturb_goal, Waypoint};

/// One recorded demonstration step.
#[derive(Debug, Clone)]
pub struct DemoStep {
    pub state: ProprioState,
    pub action: Action,
    pub cloud: PointCloud,
    pub gripper_cmd: f64,
}

/// A full scripted demonstration.
#[derive(Debug, Clone)]
pub struct Demonstration {
    pub steps: Vec<DemoStep>,
    pub task: TaskSpec,
    pub success: bool,
    pub final_scene: Scene,
}

enum Motion {
    MoveTo(Vec3),
    Grip { closed: bool, settle: usize },
}

fn plan(scene: &Scene, task: &TaskSpec, params: &WorldParams) -> Result<Vec<Motion>> {
    let target = &scene.objects[task.target_object];
    match task.kind {
        TaskKind::Reach => {
            let goal = reach_point(target);
            Ok(vec![
                Motion::MoveTo(Vec3::new(goal.x, goal.y, goal.z + 0.07)),
                Motion::MoveTo(goal),
            ])
        }
        TaskKind::ObstacleReach => {
            let goal = reach_point(target);
            let wall = scene
                .obstacles
                .first()
                .ok_or_else(|| Error::Infeasible("obstacle task without obstacle".into()))?;
            // Rise above the wall with clearance, traverse, descend.
            let safe_z = wall.pose.position.z + wall.half_extents.z + params.clearance;
            let start = scene.gripper.position;
            Ok(vec![
                Motion::MoveTo(Vec3::new(start.x, start.y, safe_z)),
                Motion::MoveTo(Vec3::new(goal.x, goal.y, safe_z)),
                Motion::MoveTo(goal),
            ])
        }
        TaskKind::PickPlace | TaskKind::Stack => {
            let grasp = target.pose.position;
            let place = place_point(scene, task)
                .ok_or_else(|| Error::Infeasible("placing task without base object".into()))?;
            let lift = 0.09;
            Ok(vec![
                Motion::MoveTo(Vec3::new(grasp.x, grasp.y, grasp.z + lift)),
                Motion::MoveTo(grasp),
                Motion::Grip {
                    closed: true,
                    settle: 3,
                },
                Motion::MoveTo(Vec3::new(grasp.x, grasp.y, grasp.z + lift)),
                Motion::MoveTo(Vec3::new(place.x, place.y, place.z + lift)),
                Motion::MoveTo(place),
                Motion::Grip {
                    closed: false,
                    settle: 3,
                },
                Motion::MoveTo(Vec3::new(place.x, place.y, place.z + lift)),
            ])
        }
    }
}

/// Generate a demonstration by executing the scripted plan through the
/// simulator, recording observations before each action.
pub fn scripted_expert(
    scene: &Scene,
    task: &TaskSpec,
    params: &WorldParams,
    rng: &mut ChaCha12Rng,
) -> Result<Demonstration> {
    scripted_expert_impl(scene, task, params, rng, true)
}

/// Demonstration without rendered clouds (cheap path for the oracle).
pub(crate) fn scripted_expert_path(
    scene: &Scene,
    task: &TaskSpec,
    params: &WorldParams,
    rng: &mut ChaCha12Rng,
) -> Result<Demonstration> {
    scripted_expert_impl(scene, task, params, rng, false)
}

fn scripted_expert_impl(
    scene: &Scene,
    task: &TaskSpec,
    params: &WorldParams,
    rng: &mut ChaCha12Rng,
    render: bool,
) -> Result<Demonstration> {
    task.validate()?;
    let motions = plan(scene, task, params)?;
    // Cruise below the speed limit, with per-demo variety.
    let cruise: f64 = params.max_speed * params.timestep * rng.gen_range(0.7..0.9);
    let cloud_seed: u64 = rng.gen();

    let mut state = scene.clone();
    let mut steps: Vec<DemoStep> = Vec::new();
    let mut gripper_cmd = 1.0f64;

    let act = |world: &mut Scene,
                   steps: &mut Vec<DemoStep>,
                   target: Pose,
                   cmd: f64|
     -> Result<()> {
        if steps.len() > task.horizon + 64 {
            return Err(Error::Infeasible(format!(
                "scripted expert exceeded horizon on {}",
                task.kind.as_str()
            )));
        }
        let cloud = if render {
            render_cloud(
                world,
                params.cloud_points,
                crate::seed::derive_seed(cloud_seed, "demo-cloud", steps.len() as u64),
            )?
        } else {
            PointCloud::empty()
        };
        let action = action_from_pose(&target, cmd);
        steps.push(DemoStep {
            state: world.proprio(),
            action,
            cloud,
            gripper_cmd: cmd,
        });
        *world = step(world, &action, params);
        Ok(())
    };

    for motion in motions {
        match motion {
            Motion::MoveTo(goal) => loop {
                let here = state.gripper.position;
                let delta = goal - here;
                let dist = delta.norm();
                if dist < 1e-9 {
                    break;
                }
                let next = if dist <= cruise {
                    goal
                } else {
                    here + delta * (cruise / dist)
                };
                let target = Pose::from_parts(next, state.gripper.orientation);
                act(&mut state, &mut steps, target, gripper_cmd)?;
            },
            Motion::Grip { closed, settle } => {
                gripper_cmd = if closed { 0.0 } else { 1.0 };
                for _ in 0..settle {
                    let hold = state.gripper;
                    act(&mut state, &mut steps, hold, gripper_cmd)?;
                }
            }
        }
    }

    let success = task_success(&state, task);
    if !success {
        return Err(Error::Infeasible(format!(
            "scripted expert missed the predicate on {}",
            task.kind.as_str()
        )));
    }
    if steps.len() < 2 {
        return Err(Error::Infeasible("degenerate demonstration".into()));
    }
    Ok(Demonstration {
        steps,
        task: task.clone(),
        success,
        final_scene: state,
    })
}

/// Sparse waypoints plus target pose, as the planner would emit them.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleGuidance {
    /// Sparse waypoints; the last entry is the target and carries the
    /// final orientation and gripper hint.
    pub waypoints: Vec<Waypoint>,
    pub target: Pose,
}

/// Sample `m` waypoints along the scripted expert's path at uniform
/// arc-length spacing, append the final pose, and perturb the whole
/// set with `perturb_goal` at the given noise scale.
pub fn waypoint_oracle(
    scene: &Scene,
    task: &TaskSpec,
    params: &WorldParams,
    m: usize,
    sigma: f64,
    rng: &mut ChaCha12Rng,
) -> Result<OracleGuidance> {
    if m < 1 {
        return Err(Error::validation("oracle needs at least one waypoint"));
    }
    let mut expert_rng = derive_rng(rng.gen(), "oracle-expert", 0);
    let demo = scripted_expert_path(scene, task, params, &mut expert_rng)?;

    let positions: Vec<Vec3> = demo
        .steps
        .iter()
        .map(|s| s.state.ee_pose.position)
        .collect();
    let cmds: Vec<f64> = demo.steps.iter().map(|s| s.gripper_cmd).collect();
    let mut cum = Vec::with_capacity(positions.len());
    let mut acc = 0.0;
    cum.push(0.0);
    for i in 1..positions.len() {
        acc += (positions[i] - positions[i - 1]).norm();
        cum.push(acc);
    }
    let total = acc.max(1e-12);

    let mut waypoints = Vec::with_capacity(m + 1);
    for i in 0..m {
        let want = total * i as f64 / m as f64;
        let idx = cum.partition_point(|&c| c < want).min(positions.len() - 1);
        waypoints.push(Waypoint {
            position: positions[idx],
            orientation: None,
            gripper_hint: Some(cmds[idx] < 0.5),
        });
    }
    let final_pose = Pose::from_parts(
        demo.final_scene.gripper.position,
        demo.final_scene.gripper.orientation,
    );
    waypoints.push(Waypoint {
        position: final_pose.position,
        orientation: Some(final_pose.orientation),
        gripper_hint: Some(!demo.final_scene.gripper_open),
    });

    let perturbed = perturb_goal(&waypoints, sigma, params.workspace.diagonal(), rng)?;
    let last = *perturbed.last().expect("target present");
    let target = Pose::from_parts(
        last.position,
        last.orientation.unwrap_or(final_pose.orientation),
    );
    Ok(OracleGuidance {
        waypoints: perturbed,
        target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::CropBox;
    use crate::seed::derive_rng;
    use crate::simworld::sample_scene;

    fn params() -> WorldParams {
        WorldParams {
            workspace: CropBox::new(Vec3::new(-0.35, -0.35, 0.0), Vec3::new(0.35, 0.35, 0.45))
                .unwrap(),
            timestep: 0.05,
            max_speed: 0.5,
            max_angular_speed: 2.0,
            attach_distance: 0.02,
            clearance: 0.05,
            cloud_points: 32,
        }
    }

    #[test]
    fn reach_demo_ends_within_tolerance() {
        let p = params();
        let (scene, task) = sample_scene(TaskKind::Reach, &p, &mut derive_rng(20, "d", 0)).unwrap();
        let demo =
            scripted_expert(&scene, &task, &p, &mut derive_rng(20, "d", 1)).unwrap();
        assert!(demo.success);
        let goal = reach_point(&demo.final_scene.objects[task.target_object]);
        assert!((demo.final_scene.gripper.position - goal).norm() <= task.tolerance);
    }

    #[test]
    fn pick_place_demo_has_exactly_two_gripper_transitions() {
        let p = params();
        let (scene, task) =
            sample_scene(TaskKind::PickPlace, &p, &mut derive_rng(21, "d", 0)).unwrap();
        let demo =
            scripted_expert(&scene, &task, &p, &mut derive_rng(21, "d", 1)).unwrap();
        assert!(demo.success);
        let mut transitions = 0;
        let mut prev = demo.steps[0].gripper_cmd >= 0.5;
        for s in &demo.steps[1..] {
            let open = s.gripper_cmd >= 0.5;
            if open != prev {
                transitions += 1;
            }
            prev = open;
        }
        assert_eq!(transitions, 2);
    }

    #[test]
    fn demos_respect_the_speed_limit() {
        let p = params();
        let mut scan = |kind: TaskKind, idx: u64| {
            let (scene, task) = sample_scene(kind, &p, &mut derive_rng(22, "d", idx)).unwrap();
            let demo =
                scripted_expert(&scene, &task, &p, &mut derive_rng(22, "e", idx)).unwrap();
            let limit = p.max_speed * p.timestep + 1e-12;
            for w in demo.steps.windows(2) {
                let d = (w[1].state.ee_pose.position - w[0].state.ee_pose.position).norm();
                assert!(d <= limit, "{kind:?}: step displacement {d}");
            }
        };
        for i in 0..25 {
            scan(TaskKind::Reach, i);
            scan(TaskKind::ObstacleReach, 100 + i);
            scan(TaskKind::PickPlace, 200 + i);
            scan(TaskKind::Stack, 300 + i);
        }
    }

    #[test]
    fn obstacle_demo_avoids_collision() {
        let p = params();
        for i in 0..20 {
            let (scene, task) =
                sample_scene(TaskKind::ObstacleReach, &p, &mut derive_rng(23, "d", i)).unwrap();
            let demo =
                scripted_expert(&scene, &task, &p, &mut derive_rng(23, "e", i)).unwrap();
            assert!(!demo.final_scene.collided);
            assert!(demo.success);
        }
    }

    #[test]
    fn oracle_without_noise_lies_on_the_expert_path() {
        let p = params();
        let (scene, task) = sample_scene(TaskKind::Reach, &p, &mut derive_rng(24, "d", 0)).unwrap();
        let guidance =
            waypoint_oracle(&scene, &task, &p, 4, 0.0, &mut derive_rng(24, "o", 0)).unwrap();
        assert_eq!(guidance.waypoints.len(), 5);

        // Rebuild the same expert path and check that every waypoint
        // sits on it within a step length.
        let demo = scripted_expert_path(
            &scene,
            &task,
            &p,
            &mut derive_rng(derive_rng(24, "o", 0).gen(), "oracle-expert", 0),
        )
        .unwrap();
        for w in &guidance.waypoints {
            let min_d = demo
                .steps
                .iter()
                .map(|s| (s.state.ee_pose.position - w.position).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(min_d <= p.max_speed * p.timestep, "min distance {min_d}");
        }
    }

    #[test]
    fn oracle_is_deterministic_and_sigma_perturbs() {
        let p = params();
        let (scene, task) = sample_scene(TaskKind::Reach, &p, &mut derive_rng(25, "d", 0)).unwrap();
        let a = waypoint_oracle(&scene, &task, &p, 4, 0.1, &mut derive_rng(25, "o", 1)).unwrap();
        let b = waypoint_oracle(&scene, &task, &p, 4, 0.1, &mut derive_rng(25, "o", 1)).unwrap();
        assert_eq!(a, b);
        let clean =
            waypoint_oracle(&scene, &task, &p, 4, 0.0, &mut derive_rng(25, "o", 1)).unwrap();
        assert_ne!(a.waypoints[0].position, clean.waypoints[0].position);
    }
}
