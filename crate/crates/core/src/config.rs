//! Run configuration: a single structured file validated up front.
//!
//! Every experiment is identified by the digest of its configuration;
//! run directories are keyed by it, which makes ablation sweeps
//! self-documenting and reruns byte-reproducible.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Extrinsics, Vec3};
use crate::pointcloud::CropBox;

/// Top-level configuration for data generation, training, evaluation,
/// and ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stream in the pipeline derives from it.
    pub seed: u64,
    pub world: WorldConfig,
    pub camera: CameraConfig,
    pub schedule: ScheduleConfig,
    pub chunk: ChunkConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            world: WorldConfig::default(),
            camera: CameraConfig::default(),
            schedule: ScheduleConfig::default(),
            chunk: ChunkConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub workspace_min: [f64; 3],
    pub workspace_max: [f64; 3],
    /// Control timestep in seconds (20 Hz loop).
    pub timestep: f64,
    /// Linear speed limit in m/s.
    pub max_speed: f64,
    /// Angular speed limit in rad/s.
    pub max_angular_speed: f64,
    /// Gripper-to-object-center distance that allows attachment.
    pub attach_distance: f64,
    /// Obstacle clearance kept by the scripted expert.
    pub clearance: f64,
    pub tasks: Vec<String>,
    pub demos_per_task: usize,
    /// Post-downsampling point count of recorded/rendered clouds.
    pub cloud_points: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            workspace_min: [-0.35, -0.35, 0.0],
            workspace_max: [0.35, 0.35, 0.45],
            timestep: 0.05,
            max_speed: 0.5,
            max_angular_speed: 2.0,
            attach_distance: 0.02,
            clearance: 0.05,
            tasks: vec![
                "reach".to_string(),
                "pick_place".to_string(),
                "obstacle_reach".to_string(),
            ],
            demos_per_task: 60,
            cloud_points: 128,
        }
    }
}

impl WorldConfig {
    pub fn workspace(&self) -> Result<CropBox> {
        CropBox::new(
            Vec3::from_array(self.workspace_min),
            Vec3::from_array(self.workspace_max),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub eye: [f64; 3],
    pub look_at: [f64; 3],
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            fx: 525.0,
            fy: 525.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
            eye: [0.0, -1.1, 0.8],
            look_at: [0.0, 0.0, 0.15],
        }
    }
}

impl CameraConfig {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
        )
    }

    pub fn extrinsics(&self) -> Result<Extrinsics> {
        Extrinsics::look_at(Vec3::from_array(self.eye), Vec3::from_array(self.look_at))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkConfig {
    /// Predicted chunk length H.
    pub horizon: usize,
    /// Steps executed before re-conditioning (receding horizon).
    pub execute: usize,
    /// Start-index stride when slicing episodes into samples.
    pub stride: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        ChunkConfig {
            horizon: 16,
            execute: 8,
            stride: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub joints: usize,
    pub state_feat: usize,
    pub guid_feat: usize,
    pub cloud_feat: usize,
    pub cloud_hidden: usize,
    pub encoder_hidden: usize,
    pub denoiser_hidden: usize,
    pub denoiser_layers: usize,
    pub step_embed: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            joints: 0,
            state_feat: 64,
            guid_feat: 64,
            cloud_feat: 128,
            cloud_hidden: 64,
            encoder_hidden: 64,
            denoiser_hidden: 256,
            denoiser_layers: 3,
            step_embed: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_batch: usize,
    pub pretrain_steps: u64,
    pub finetune_batch: usize,
    pub finetune_steps: u64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// Goal-noise augmentation scale applied during fine-tuning.
    pub sigma: f64,
    /// Guidance sampling lookahead (phase units).
    pub lookahead: f64,
    /// Fraction of episodes held out for validation.
    pub val_fraction: f64,
    /// Steps between validation evaluations.
    pub val_interval: u64,
    /// Steps between metrics-log records.
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_batch: 4096,
            pretrain_steps: 600,
            finetune_batch: 64,
            finetune_steps: 20_000,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            sigma: 0.1,
            lookahead: 0.05,
            val_fraction: 0.1,
            val_interval: 200,
            log_interval: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Episodes per (task, condition).
    pub episodes: usize,
    /// Waypoint-oracle noise scale at evaluation time.
    pub oracle_sigma: f64,
    /// Sparse waypoints emitted by the oracle (target excluded).
    pub oracle_waypoints: usize,
    /// `projection` (nearest point plus lookahead) or `nominal_time`.
    pub guidance_mode: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 50,
            oracle_sigma: 0.1,
            oracle_waypoints: 4,
            guidance_mode: "projection".to_string(),
        }
    }
}

impl RunConfig {
    /// Parse and validate a TOML configuration file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Validation(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Check every field against the preconditions of the module that
    /// owns it, before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.world.workspace()?;
        self.camera.intrinsics()?;
        self.camera.extrinsics()?;
        crate::diffusion::make_schedule(
            self.schedule.steps,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )?;

        let w = &self.world;
        if w.timestep <= 0.0 || w.max_speed <= 0.0 || w.max_angular_speed <= 0.0 {
            return Err(Error::validation(
                "timestep and speed limits must be positive",
            ));
        }
        if w.attach_distance <= 0.0 || w.clearance <= 0.0 {
            return Err(Error::validation(
                "attach distance and clearance must be positive",
            ));
        }
        if w.tasks.is_empty() {
            return Err(Error::validation("task list is empty"));
        }
        for t in &w.tasks {
            crate::simworld::TaskKind::parse(t)?;
        }
        if w.demos_per_task == 0 {
            return Err(Error::validation("demos_per_task must be >= 1"));
        }
        if w.cloud_points == 0 {
            return Err(Error::validation("cloud_points must be >= 1"));
        }

        let c = &self.chunk;
        if c.horizon == 0 || c.execute == 0 || c.stride == 0 {
            return Err(Error::validation(
                "horizon, execute, and stride must be >= 1",
            ));
        }
        if c.execute > c.horizon {
            return Err(Error::validation("execute length exceeds horizon"));
        }

        let m = &self.model;
        if m.state_feat == 0 || m.guid_feat == 0 || m.cloud_feat == 0 {
            return Err(Error::validation("feature widths must be >= 1"));
        }
        if m.step_embed == 0 || m.step_embed % 2 != 0 {
            return Err(Error::validation("step_embed must be even and positive"));
        }
        if m.denoiser_layers == 0 || m.denoiser_hidden == 0 {
            return Err(Error::validation("denoiser must have hidden layers"));
        }

        let t = &self.train;
        if t.pretrain_batch == 0 || t.finetune_batch == 0 {
            return Err(Error::validation("batch sizes must be >= 1"));
        }
        if t.lr <= 0.0 {
            return Err(Error::validation("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&t.adam_beta1) || !(0.0..1.0).contains(&t.adam_beta2) {
            return Err(Error::validation("adam betas must lie in [0, 1)"));
        }
        if t.sigma < 0.0 {
            return Err(Error::validation("sigma must be >= 0"));
        }
        if !(0.0..1.0).contains(&t.val_fraction) {
            return Err(Error::validation("val_fraction must lie in [0, 1)"));
        }
        if t.log_interval == 0 || t.val_interval == 0 {
            return Err(Error::validation("log/val intervals must be >= 1"));
        }

        let e = &self.eval;
        if e.episodes == 0 {
            return Err(Error::validation("eval episodes must be >= 1"));
        }
        if e.oracle_sigma < 0.0 {
            return Err(Error::validation("oracle sigma must be >= 0"));
        }
        if e.oracle_waypoints < 1 {
            return Err(Error::validation("oracle needs at least one waypoint"));
        }
        if e.guidance_mode != "projection" && e.guidance_mode != "nominal_time" {
            return Err(Error::Validation(format!(
                "unknown guidance mode {:?}",
                e.guidance_mode
            )));
        }
        Ok(())
    }

    /// Digest identifying the experiment (hex SHA-256 of the canonical
    /// JSON form).
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Short prefix of [`RunConfig::digest`] used for directory names.
    pub fn digest_short(&self) -> String {
        self.digest()[..16].to_string()
    }
}
