//! Closed-loop episode execution: observe, infer a chunk, execute a
//! prefix, repeat (receding horizon).

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::{render_cloud, step, task_success, waypoint_oracle, Scene, TaskKind, TaskSpec,
    WorldParams};
use crate::diffusion::{action_from_pose, Action, ActionChunk};
use crate::error::Result;
use crate::expert::{ConditioningSet, ExpertPolicy, ProprioState};
use crate::pointcloud::PointCloud;
use crate::seed::{derive_rng, derive_seed};
use crate::trajectory::{fit_waypoints, sample_guidance, GuidancePose, GuidanceTrajectory};

/// How the guidance phase advances during execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Nearest-point projection of the end effector plus a lookahead.
    Projection,
    /// Phase advances with elapsed time over the duration hint.
    NominalTime,
}

impl GuidanceMode {
    pub fn parse(s: &str) -> crate::error::Result<GuidanceMode> {
        match s {
            "projection" => Ok(GuidanceMode::Projection),
            "nominal_time" => Ok(GuidanceMode::NominalTime),
            other => Err(crate::error::Error::Validation(format!(
                "unknown guidance mode {other:?}"
            ))),
        }
    }
}

/// Episode-runner knobs.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeOptions {
    /// Actions executed from each predicted chunk.
    pub execute: usize,
    pub lookahead: f64,
    pub guidance_mode: GuidanceMode,
    pub oracle_sigma: f64,
    pub oracle_waypoints: usize,
}

/// What a controller sees at the start of each chunk.
#[derive(Debug, Clone)]
pub struct Observation {
    pub state: ProprioState,
    pub cloud: PointCloud,
    pub guidance: GuidancePose,
    pub steps_elapsed: usize,
}

/// A policy (or baseline) driving episodes chunk by chunk.
pub trait Controller {
    fn reset(&mut self, traj: &GuidanceTrajectory);
    fn next_chunk(&mut self, obs: &Observation, rng: &mut ChaCha12Rng) -> Result<ActionChunk>;
}

/// The learned expert as a controller.
pub struct ExpertController<'a> {
    pub policy: &'a ExpertPolicy<f32>,
}

impl Controller for ExpertController<'_> {
    fn reset(&mut self, _traj: &GuidanceTrajectory) {}

    fn next_chunk(&mut self, obs: &Observation, rng: &mut ChaCha12Rng) -> Result<ActionChunk> {
        let set = ConditioningSet {
            state: obs.state.clone(),
            guidance: obs.guidance,
            cloud: obs.cloud.clone(),
            cloud_masked: false,
        };
        self.policy.infer_action(&set, rng)
    }
}

/// Execute the interpolated guidance directly: uniformly advancing
/// phase as absolute pose actions, gripper commands fired when the
/// phase passes a waypoint carrying a hint.
pub struct SplineFollowController {
    pub timestep: f64,
    pub chunk: usize,
    stream: Vec<Action>,
    cursor: usize,
}

impl SplineFollowController {
    pub fn new(timestep: f64, chunk: usize) -> SplineFollowController {
        SplineFollowController {
            timestep,
            chunk,
            stream: Vec::new(),
            cursor: 0,
        }
    }
}

/// The action stream of the spline-follow baseline: `n` steps of
/// uniformly advancing phase (then holding the final pose).
pub fn spline_follow_stream(traj: &GuidanceTrajectory, timestep: f64, n: usize) -> Vec<Action> {
    let total_steps = (traj.duration_hint / timestep).ceil().max(1.0);
    let mut gripper = 1.0f64;
    let mut fired = vec![false; traj.gripper_keys().len()];
    let mut out = Vec::with_capacity(n);
    for i in 1..=n {
        let phase = (i as f64 / total_steps).min(1.0);
        for (slot, (knot, closed)) in fired.iter_mut().zip(traj.gripper_keys()) {
            if !*slot && phase >= *knot {
                *slot = true;
                gripper = if *closed { 0.0 } else { 1.0 };
            }
        }
        out.push(action_from_pose(&traj.eval(phase), gripper));
    }
    out
}

impl Controller for SplineFollowController {
    fn reset(&mut self, traj: &GuidanceTrajectory) {
        // Enough steps to finish the curve, then hold.
        let n = (traj.duration_hint / self.timestep).ceil() as usize + 400;
        self.stream = spline_follow_stream(traj, self.timestep, n);
        self.cursor = 0;
    }

    fn next_chunk(&mut self, _obs: &Observation, _rng: &mut ChaCha12Rng) -> Result<ActionChunk> {
        let last = *self.stream.last().expect("nonempty stream");
        let actions: Vec<Action> = (0..self.chunk)
            .map(|i| *self.stream.get(self.cursor + i).unwrap_or(&last))
            .collect();
        self.cursor += self.chunk;
        Ok(ActionChunk::from_actions(&actions))
    }
}

/// Replays a fixed action sequence (e.g. a scripted demonstration).
pub struct ReplayController {
    pub actions: Vec<Action>,
    pub chunk: usize,
    cursor: usize,
}

impl ReplayController {
    pub fn new(actions: Vec<Action>, chunk: usize) -> ReplayController {
        ReplayController {
            actions,
            chunk,
            cursor: 0,
        }
    }
}

impl Controller for ReplayController {
    fn reset(&mut self, _traj: &GuidanceTrajectory) {
        self.cursor = 0;
    }

    fn next_chunk(&mut self, obs: &Observation, _rng: &mut ChaCha12Rng) -> Result<ActionChunk> {
        let hold = action_from_pose(&obs.state.ee_pose, obs.state.gripper_state);
        let last = *self.actions.last().unwrap_or(&hold);
        let actions: Vec<Action> = (0..self.chunk)
            .map(|i| *self.actions.get(self.cursor + i).unwrap_or(&last))
            .collect();
        self.cursor += self.chunk;
        Ok(ActionChunk::from_actions(&actions))
    }
}

/// Holds the current pose forever (sanity baseline).
pub struct HoldController {
    pub chunk: usize,
}

impl Controller for HoldController {
    fn reset(&mut self, _traj: &GuidanceTrajectory) {}

    fn next_chunk(&mut self, obs: &Observation, _rng: &mut ChaCha12Rng) -> Result<ActionChunk> {
        let hold = action_from_pose(&obs.state.ee_pose, obs.state.gripper_state);
        Ok(ActionChunk::from_actions(&vec![hold; self.chunk]))
    }
}

/// One evaluated episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub task: TaskKind,
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub collision: bool,
    /// Mean distance from the executed end effector to the guidance
    /// curve.
    pub tracking_error: f64,
    /// Controller failure message, if any (episode counted as failed).
    pub error: Option<String>,
}

/// Run one closed-loop episode. Controller errors become a failed
/// outcome record; they never abort a sweep.
///
/// The waypoint oracle, the controller's sampler, and per-step cloud
/// rendering all derive from `seed`, so one seed fully determines the
/// outcome.
pub fn run_episode(
    controller: &mut dyn Controller,
    scene0: &Scene,
    task: &TaskSpec,
    params: &WorldParams,
    opts: &EpisodeOptions,
    seed: u64,
) -> OutcomeRecord {
    let mut record = OutcomeRecord {
        task: task.kind,
        seed,
        success: false,
        steps: 0,
        collision: false,
        tracking_error: 0.0,
        error: None,
    };

    let mut oracle_rng = derive_rng(seed, "ep-oracle", 0);
    let guidance = match waypoint_oracle(
        scene0,
        task,
        params,
        opts.oracle_waypoints,
        opts.oracle_sigma,
        &mut oracle_rng,
    ) {
        Ok(g) => g,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };
    let traj = match fit_waypoints(&guidance.waypoints) {
        Ok(t) => t,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };
    controller.reset(&traj);

    let mut policy_rng = derive_rng(seed, "ep-policy", 0);
    let mut scene = scene0.clone();
    let mut tracking_sum = 0.0;
    let mut tracking_n = 0usize;

    if task_success(&scene, task) {
        record.success = true;
        return record;
    }

    'episode: while record.steps < task.horizon {
        let cloud = match render_cloud(
            &scene,
            params.cloud_points,
            derive_seed(seed, "ep-cloud", record.steps as u64),
        ) {
            Ok(c) => c,
            Err(e) => {
                record.error = Some(e.to_string());
                break;
            }
        };
        let guidance_pose = match opts.guidance_mode {
            GuidanceMode::Projection => {
                sample_guidance(&traj, scene.gripper.position, opts.lookahead)
            }
            GuidanceMode::NominalTime => {
                let phase = traj.phase_at_time(record.steps as f64 * params.timestep);
                GuidancePose {
                    pose: traj.eval(phase),
                    phase,
                }
            }
        };
        let obs = Observation {
            state: scene.proprio(),
            cloud,
            guidance: guidance_pose,
            steps_elapsed: record.steps,
        };
        let chunk = match controller.next_chunk(&obs, &mut policy_rng) {
            Ok(c) => c,
            Err(e) => {
                record.error = Some(e.to_string());
                break;
            }
        };
        for t in 0..opts.execute.min(chunk.horizon()) {
            scene = step(&scene, &chunk.action(t), params);
            record.steps += 1;
            let ee = scene.gripper.position;
            tracking_sum += (traj.position(traj.project_phase(ee)) - ee).norm();
            tracking_n += 1;
            if scene.collided {
                record.collision = true;
                break 'episode;
            }
            if task_success(&scene, task) {
                record.success = true;
                break 'episode;
            }
            if record.steps >= task.horizon {
                break 'episode;
            }
        }
    }

    if tracking_n > 0 {
        record.tracking_error = tracking_sum / tracking_n as f64;
    }
    record
}
