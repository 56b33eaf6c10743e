//! The conditional diffusion action expert.
//!
//! Three encoders (proprioceptive state, guidance pose, point cloud)
//! produce a fused conditioning feature; a denoiser MLP predicts the
//! noise added to an action chunk. During action pre-training the
//! point-cloud slot of the conditioning feature is masked to zeros and
//! the cloud encoder stays untouched; point-cloud fine-tuning unmasks
//! it and trains everything.

mod train;

pub use train::{
    grad_check, train_finetune, train_pretrain, validation_loss, FinetuneOptions, GradCheckReport,
    StepRecord, TrainResult,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diffkernel::{
    init_mlp, mlp_backward, mlp_forward, read_checkpoint, sinusoidal_embed, write_checkpoint,
    Checkpoint, CheckpointMeta, Gradients, MlpSpec, MlpTrace, ParameterSet, Scalar, Tensor,
};
use crate::diffusion::{
    denoise_sample, ActionChunk, NoisePredictor, NoiseSchedule, ACTION_WIDTH,
};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Quat, Vec3};
use crate::pointcloud::{crop, normalize_cloud, CropBox, PointCloud};
use crate::trajectory::GuidancePose;

/// Robot proprioception at one control step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProprioState {
    pub joint_positions: Vec<f64>,
    pub ee_pose: Pose,
    /// Physical gripper opening in `[0, 1]` (0 closed, 1 open).
    pub gripper_state: f64,
}

impl ProprioState {
    pub fn validate(&self) -> Result<()> {
        if !self.ee_pose.is_finite()
            || !self.gripper_state.is_finite()
            || self.joint_positions.iter().any(|j| !j.is_finite())
        {
            return Err(Error::validation("non-finite proprioceptive state"));
        }
        if !(0.0..=1.0).contains(&self.gripper_state) {
            return Err(Error::Validation(format!(
                "gripper state {} outside [0, 1]",
                self.gripper_state
            )));
        }
        Ok(())
    }
}

/// Everything the expert conditions on at one timestep.
#[derive(Debug, Clone)]
pub struct ConditioningSet {
    pub state: ProprioState,
    pub guidance: GuidancePose,
    pub cloud: PointCloud,
    /// Force-mask the cloud even on a fine-tuned policy.
    pub cloud_masked: bool,
}

/// Training stage of a policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initialized,
    Pretrained,
    Finetuned,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Initialized => "initialized",
            Stage::Pretrained => "pretrained",
            Stage::Finetuned => "finetuned",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        match s {
            "initialized" => Ok(Stage::Initialized),
            "pretrained" => Ok(Stage::Pretrained),
            "finetuned" => Ok(Stage::Finetuned),
            other => Err(Error::Validation(format!("unknown stage {other:?}"))),
        }
    }
}

/// Network widths of the expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertArch {
    pub joints: usize,
    pub state_feat: usize,
    pub guid_feat: usize,
    pub cloud_feat: usize,
    pub cloud_hidden: usize,
    pub encoder_hidden: usize,
    pub denoiser_hidden: usize,
    pub denoiser_layers: usize,
    pub step_embed: usize,
    pub horizon: usize,
}

impl ExpertArch {
    pub fn from_config(cfg: &RunConfig) -> ExpertArch {
        ExpertArch {
            joints: cfg.model.joints,
            state_feat: cfg.model.state_feat,
            guid_feat: cfg.model.guid_feat,
            cloud_feat: cfg.model.cloud_feat,
            cloud_hidden: cfg.model.cloud_hidden,
            encoder_hidden: cfg.model.encoder_hidden,
            denoiser_hidden: cfg.model.denoiser_hidden,
            denoiser_layers: cfg.model.denoiser_layers,
            step_embed: cfg.model.step_embed,
            horizon: cfg.chunk.horizon,
        }
    }

    pub fn state_input(&self) -> usize {
        self.joints + 7 + 1
    }

    pub fn guid_input(&self) -> usize {
        8
    }

    pub fn chunk_len(&self) -> usize {
        self.horizon * ACTION_WIDTH
    }

    pub fn fused_len(&self) -> usize {
        self.state_feat + self.guid_feat + self.cloud_feat
    }

    pub fn denoiser_input(&self) -> usize {
        self.chunk_len() + self.step_embed + self.fused_len()
    }

    pub fn state_spec(&self) -> MlpSpec {
        MlpSpec::new(self.state_input(), vec![self.encoder_hidden], self.state_feat)
    }

    pub fn guid_spec(&self) -> MlpSpec {
        MlpSpec::new(self.guid_input(), vec![self.encoder_hidden], self.guid_feat)
    }

    /// Shared per-point MLP of the cloud encoder.
    pub fn cloud_spec(&self) -> MlpSpec {
        MlpSpec::new(3, vec![self.cloud_hidden], self.cloud_feat)
    }

    pub fn denoiser_spec(&self) -> MlpSpec {
        MlpSpec::new(
            self.denoiser_input(),
            vec![self.denoiser_hidden; self.denoiser_layers],
            self.chunk_len(),
        )
    }
}

/// Affine maps between environment units and the normalized space the
/// networks operate in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub workspace: CropBox,
}

impl Normalizer {
    fn point_map(&self) -> crate::pointcloud::Normalization {
        crate::pointcloud::Normalization::for_workspace(&self.workspace)
    }

    pub fn point(&self, p: Vec3) -> Vec3 {
        self.point_map().apply(p)
    }

    pub fn point_inv(&self, p: Vec3) -> Vec3 {
        self.point_map().invert(p)
    }

    /// Flattened encoder input for a proprioceptive state:
    /// joints, normalized position, quaternion, gripper in [-1, 1].
    pub fn state_row(&self, s: &ProprioState) -> Vec<f64> {
        let mut row = Vec::with_capacity(s.joint_positions.len() + 8);
        row.extend_from_slice(&s.joint_positions);
        let p = self.point(s.ee_pose.position);
        row.extend_from_slice(&p.to_array());
        row.extend_from_slice(&s.ee_pose.orientation.to_array());
        row.push(2.0 * s.gripper_state - 1.0);
        row
    }

    /// Flattened encoder input for a guidance pose.
    pub fn guid_row(&self, g: &GuidancePose) -> Vec<f64> {
        let mut row = Vec::with_capacity(8);
        let p = self.point(g.pose.position);
        row.extend_from_slice(&p.to_array());
        row.extend_from_slice(&g.pose.orientation.to_array());
        row.push(2.0 * g.phase - 1.0);
        row
    }

    /// Map an environment-space chunk into diffusion space.
    pub fn chunk_to_diffusion(&self, chunk: &ActionChunk) -> ActionChunk {
        let mut out = chunk.clone();
        for t in 0..chunk.horizon() {
            let a = chunk.action(t);
            let p = self.point(Vec3::new(a[0], a[1], a[2]));
            out.set_action(
                t,
                [p.x, p.y, p.z, a[3], a[4], a[5], a[6], 2.0 * a[7] - 1.0],
            );
        }
        out
    }

    /// Map a diffusion-space chunk back to environment units, leaving
    /// the quaternion and gripper channels raw.
    pub fn chunk_from_diffusion(&self, chunk: &ActionChunk) -> ActionChunk {
        let mut out = chunk.clone();
        for t in 0..chunk.horizon() {
            let a = chunk.action(t);
            let p = self.point_inv(Vec3::new(a[0], a[1], a[2]));
            out.set_action(
                t,
                [p.x, p.y, p.z, a[3], a[4], a[5], a[6], (a[7] + 1.0) / 2.0],
            );
        }
        out
    }
}

/// The fused conditioning feature of one observation.
///
/// `f_a` is exactly the concatenation `[f_s | f_g | f_pc]`; when the
/// cloud is masked the `f_pc` slot is exactly zeros.
#[derive(Debug, Clone)]
pub struct ConditioningFeature<S: Scalar> {
    pub f_s: Tensor<S>,
    pub f_g: Tensor<S>,
    pub f_pc: Tensor<S>,
    pub f_a: Tensor<S>,
}

/// Concatenate encoder outputs in fixed `(state, guidance, cloud)`
/// order, zeroing the cloud slot when masked.
pub fn fuse<S: Scalar>(
    f_s: &Tensor<S>,
    f_g: &Tensor<S>,
    f_pc: &Tensor<S>,
    masked: bool,
    arch: &ExpertArch,
) -> Result<ConditioningFeature<S>> {
    for (name, t, want) in [
        ("f_s", f_s, arch.state_feat),
        ("f_g", f_g, arch.guid_feat),
        ("f_pc", f_pc, arch.cloud_feat),
    ] {
        if t.shape() != [1, want] {
            return Err(Error::Validation(format!(
                "{name} has shape {:?}, expected [1, {want}]",
                t.shape()
            )));
        }
    }
    let f_pc = if masked {
        Tensor::zeros(vec![1, arch.cloud_feat])
    } else {
        f_pc.clone()
    };
    let mut fused = Vec::with_capacity(arch.fused_len());
    fused.extend_from_slice(f_s.data());
    fused.extend_from_slice(f_g.data());
    fused.extend_from_slice(f_pc.data());
    let f_a = Tensor::from_vec(vec![1, arch.fused_len()], fused)?;
    Ok(ConditioningFeature {
        f_s: f_s.clone(),
        f_g: f_g.clone(),
        f_pc,
        f_a,
    })
}

/// One training batch in tensor form (diffusion space).
pub struct BatchTensors<'a, S: Scalar> {
    pub state_rows: Tensor<S>,
    pub guid_rows: Tensor<S>,
    /// Per-sample normalized clouds, `None` for empty clouds.
    pub clouds: Vec<Option<&'a Tensor<S>>>,
    pub ks: Vec<usize>,
    pub a_k: Tensor<S>,
    pub masked: bool,
}

/// Recorded forward pass of the whole policy over one batch.
pub struct PolicyTraces<S: Scalar> {
    state: MlpTrace<S>,
    guid: MlpTrace<S>,
    clouds: Vec<Option<CloudTrace<S>>>,
    denoiser: MlpTrace<S>,
    batch: usize,
    consumed: bool,
}

struct CloudTrace<S: Scalar> {
    trace: MlpTrace<S>,
    /// Row index of the per-column maximum (max-pool routing).
    argmax: Vec<usize>,
    points: usize,
}

/// Gradients grouped by parameter set.
#[derive(Debug, Default)]
pub struct PolicyGrads<S: Scalar> {
    pub state: Gradients<S>,
    pub guid: Gradients<S>,
    pub cloud: Gradients<S>,
    pub denoiser: Gradients<S>,
}

/// The action expert: encoder and denoiser parameter sets, the noise
/// schedule, and the training-stage tag.
#[derive(Debug, Clone)]
pub struct ExpertPolicy<S: Scalar> {
    pub arch: ExpertArch,
    pub normalizer: Normalizer,
    pub schedule: NoiseSchedule,
    pub stage: Stage,
    pub state_enc: ParameterSet<S>,
    pub guid_enc: ParameterSet<S>,
    pub cloud_enc: ParameterSet<S>,
    pub denoiser: ParameterSet<S>,
}

const STATE_PREFIX: &str = "state";
const GUID_PREFIX: &str = "guid";
const CLOUD_PREFIX: &str = "cloud";
const DENOISER_PREFIX: &str = "eps";

impl<S: Scalar> ExpertPolicy<S> {
    /// Fresh policy with seeded initialization.
    pub fn init(
        arch: ExpertArch,
        workspace: CropBox,
        schedule: NoiseSchedule,
        rng: &mut impl Rng,
    ) -> ExpertPolicy<S> {
        let mut state_enc = ParameterSet::new();
        init_mlp(&mut state_enc, STATE_PREFIX, &arch.state_spec(), rng);
        let mut guid_enc = ParameterSet::new();
        init_mlp(&mut guid_enc, GUID_PREFIX, &arch.guid_spec(), rng);
        let mut cloud_enc = ParameterSet::new();
        init_mlp(&mut cloud_enc, CLOUD_PREFIX, &arch.cloud_spec(), rng);
        let mut denoiser = ParameterSet::new();
        init_mlp(&mut denoiser, DENOISER_PREFIX, &arch.denoiser_spec(), rng);
        ExpertPolicy {
            arch,
            normalizer: Normalizer { workspace },
            schedule,
            stage: Stage::Initialized,
            state_enc,
            guid_enc,
            cloud_enc,
            denoiser,
        }
    }

    /// Whether inference masks the cloud (pre-fine-tuning stages do).
    pub fn masked_at_inference(&self) -> bool {
        self.stage != Stage::Finetuned
    }

    // ------------------------------------------------------------------
    // Encoders

    /// Encode one proprioceptive state into its feature vector.
    pub fn encode_state(&self, s: &ProprioState) -> Result<Tensor<S>> {
        s.validate()?;
        if s.joint_positions.len() != self.arch.joints {
            return Err(Error::Validation(format!(
                "state has {} joints, policy configured for {}",
                s.joint_positions.len(),
                self.arch.joints
            )));
        }
        let row = self.normalizer.state_row(s);
        let x = Tensor::from_f64_slice(vec![1, row.len()], &row)?;
        let (y, _) = mlp_forward(&self.state_enc, STATE_PREFIX, &self.arch.state_spec(), &x)?;
        Ok(y)
    }

    /// Encode one guidance pose into its feature vector.
    pub fn encode_guidance(&self, g: &GuidancePose) -> Result<Tensor<S>> {
        let row = self.normalizer.guid_row(g);
        let x = Tensor::from_f64_slice(vec![1, row.len()], &row)?;
        let (y, _) = mlp_forward(&self.guid_enc, GUID_PREFIX, &self.arch.guid_spec(), &x)?;
        Ok(y)
    }

    /// Encode a cloud (already in base frame) into its feature vector:
    /// crop to the workspace, normalize, shared per-point MLP, then a
    /// componentwise max over points. Empty clouds yield zeros.
    pub fn encode_cloud(&self, cloud: &PointCloud) -> Result<Tensor<S>> {
        let prepared = self.prepare_cloud(cloud);
        match prepared {
            None => Ok(Tensor::zeros(vec![1, self.arch.cloud_feat])),
            Some(points) => {
                let (pooled, _) = self.cloud_forward(&points)?;
                Ok(pooled)
            }
        }
    }

    /// Crop, normalize, and tensorize a cloud; `None` when empty.
    pub fn prepare_cloud(&self, cloud: &PointCloud) -> Option<Tensor<S>> {
        let cropped = crop(cloud, &self.normalizer.workspace);
        if cropped.is_empty() {
            return None;
        }
        let normalized = normalize_cloud(&cropped, &self.normalizer.workspace);
        let mut data = Vec::with_capacity(normalized.len() * 3);
        for p in &normalized.points {
            data.push(S::from_f64(p.x));
            data.push(S::from_f64(p.y));
            data.push(S::from_f64(p.z));
        }
        Some(Tensor::from_vec(vec![normalized.len(), 3], data).expect("consistent shape"))
    }

    fn cloud_forward(&self, points: &Tensor<S>) -> Result<(Tensor<S>, CloudTrace<S>)> {
        let (per_point, trace) =
            mlp_forward(&self.cloud_enc, CLOUD_PREFIX, &self.arch.cloud_spec(), points)?;
        let (rows, cols) = (per_point.rows(), per_point.cols());
        let mut pooled = Tensor::zeros(vec![1, cols]);
        let mut argmax = vec![0usize; cols];
        for c in 0..cols {
            let mut best = per_point.data()[c];
            let mut best_r = 0;
            for r in 1..rows {
                let v = per_point.data()[r * cols + c];
                if v > best {
                    best = v;
                    best_r = r;
                }
            }
            pooled.data_mut()[c] = best;
            argmax[c] = best_r;
        }
        Ok((
            pooled,
            CloudTrace {
                trace,
                argmax,
                points: rows,
            },
        ))
    }

    // ------------------------------------------------------------------
    // Denoiser

    /// Noise prediction for one (chunk, step, conditioning) triple.
    /// The chunk lives in diffusion space; output has the chunk shape.
    pub fn predict_noise(
        &self,
        a_k: &Tensor<S>,
        k: usize,
        f_a: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        if a_k.shape() != [1, self.arch.chunk_len()] {
            return Err(Error::Validation(format!(
                "chunk shape {:?}, expected [1, {}]",
                a_k.shape(),
                self.arch.chunk_len()
            )));
        }
        if f_a.shape() != [1, self.arch.fused_len()] {
            return Err(Error::Validation(format!(
                "conditioning shape {:?}, expected [1, {}]",
                f_a.shape(),
                self.arch.fused_len()
            )));
        }
        let embed: Tensor<S> = sinusoidal_embed(k, self.arch.step_embed)?;
        let mut row = Vec::with_capacity(self.arch.denoiser_input());
        row.extend_from_slice(a_k.data());
        row.extend_from_slice(embed.data());
        row.extend_from_slice(f_a.data());
        let x = Tensor::from_vec(vec![1, row.len()], row)?;
        let (y, _) = mlp_forward(&self.denoiser, DENOISER_PREFIX, &self.arch.denoiser_spec(), &x)?;
        Ok(y)
    }

    /// Batched forward pass of the full policy, recording traces.
    pub fn forward_batch<'a>(
        &self,
        batch: &BatchTensors<'a, S>,
    ) -> Result<(Tensor<S>, PolicyTraces<S>)> {
        let b = batch.state_rows.rows();
        if batch.guid_rows.rows() != b
            || batch.a_k.rows() != b
            || batch.ks.len() != b
            || batch.clouds.len() != b
        {
            return Err(Error::validation("inconsistent batch sizes"));
        }
        let (f_s, t_s) = mlp_forward(
            &self.state_enc,
            STATE_PREFIX,
            &self.arch.state_spec(),
            &batch.state_rows,
        )?;
        let (f_g, t_g) = mlp_forward(
            &self.guid_enc,
            GUID_PREFIX,
            &self.arch.guid_spec(),
            &batch.guid_rows,
        )?;

        let cf = self.arch.cloud_feat;
        let mut f_pc = Tensor::zeros(vec![b, cf]);
        let mut cloud_traces = Vec::with_capacity(b);
        if batch.masked {
            cloud_traces.resize_with(b, || None);
        } else {
            for (i, cloud) in batch.clouds.iter().enumerate() {
                match cloud {
                    None => cloud_traces.push(None),
                    Some(points) => {
                        let (pooled, trace) = self.cloud_forward(points)?;
                        f_pc.row_mut(i).copy_from_slice(pooled.data());
                        cloud_traces.push(Some(trace));
                    }
                }
            }
        }

        let den_in_w = self.arch.denoiser_input();
        let mut den_in = Tensor::zeros(vec![b, den_in_w]);
        let l = self.arch.chunk_len();
        let e = self.arch.step_embed;
        for i in 0..b {
            let embed: Tensor<S> = sinusoidal_embed(batch.ks[i], e)?;
            let row = den_in.row_mut(i);
            row[..l].copy_from_slice(batch.a_k.row(i));
            row[l..l + e].copy_from_slice(embed.data());
            let fused = &mut row[l + e..];
            fused[..self.arch.state_feat].copy_from_slice(f_s.row(i));
            fused[self.arch.state_feat..self.arch.state_feat + self.arch.guid_feat]
                .copy_from_slice(f_g.row(i));
            fused[self.arch.state_feat + self.arch.guid_feat..].copy_from_slice(f_pc.row(i));
        }

        let (eps_hat, t_d) = mlp_forward(
            &self.denoiser,
            DENOISER_PREFIX,
            &self.arch.denoiser_spec(),
            &den_in,
        )?;
        Ok((
            eps_hat,
            PolicyTraces {
                state: t_s,
                guid: t_g,
                clouds: cloud_traces,
                denoiser: t_d,
                batch: b,
                consumed: false,
            },
        ))
    }

    /// Reverse-mode gradients for a recorded batch forward pass.
    pub fn backward_batch(
        &self,
        traces: &mut PolicyTraces<S>,
        upstream: &Tensor<S>,
    ) -> Result<PolicyGrads<S>> {
        if traces.consumed {
            return Err(Error::State(
                "policy backward already ran; re-record the forward pass".to_string(),
            ));
        }
        traces.consumed = true;

        let mut grads = PolicyGrads::default();
        let d_den_in = mlp_backward(
            &self.denoiser,
            DENOISER_PREFIX,
            &self.arch.denoiser_spec(),
            &mut traces.denoiser,
            upstream,
            &mut grads.denoiser,
        )?;

        let b = traces.batch;
        let l = self.arch.chunk_len();
        let e = self.arch.step_embed;
        let sf = self.arch.state_feat;
        let gf = self.arch.guid_feat;
        let cf = self.arch.cloud_feat;

        let mut d_fs = Tensor::zeros(vec![b, sf]);
        let mut d_fg = Tensor::zeros(vec![b, gf]);
        let mut d_fpc = Tensor::zeros(vec![b, cf]);
        for i in 0..b {
            let row = d_den_in.row(i);
            let fused = &row[l + e..];
            d_fs.row_mut(i).copy_from_slice(&fused[..sf]);
            d_fg.row_mut(i).copy_from_slice(&fused[sf..sf + gf]);
            d_fpc.row_mut(i).copy_from_slice(&fused[sf + gf..]);
        }

        mlp_backward(
            &self.state_enc,
            STATE_PREFIX,
            &self.arch.state_spec(),
            &mut traces.state,
            &d_fs,
            &mut grads.state,
        )?;
        mlp_backward(
            &self.guid_enc,
            GUID_PREFIX,
            &self.arch.guid_spec(),
            &mut traces.guid,
            &d_fg,
            &mut grads.guid,
        )?;

        for (i, cloud_trace) in traces.clouds.iter_mut().enumerate() {
            if let Some(ct) = cloud_trace {
                // Max-pool backward: route each column gradient to the
                // point that won the max.
                let mut d_points = Tensor::zeros(vec![ct.points, cf]);
                for c in 0..cf {
                    let r = ct.argmax[c];
                    d_points.data_mut()[r * cf + c] = d_fpc.data()[i * cf + c];
                }
                mlp_backward(
                    &self.cloud_enc,
                    CLOUD_PREFIX,
                    &self.arch.cloud_spec(),
                    &mut ct.trace,
                    &d_points,
                    &mut grads.cloud,
                )?;
            }
        }
        Ok(grads)
    }

    /// Conditioning feature for one observation (cloud skipped
    /// entirely when masked, so masked inference never reads it).
    pub fn condition(&self, obs: &ConditioningSet) -> Result<ConditioningFeature<S>> {
        let masked = obs.cloud_masked || self.masked_at_inference();
        let f_s = self.encode_state(&obs.state)?;
        let f_g = self.encode_guidance(&obs.guidance)?;
        let f_pc = if masked {
            Tensor::zeros(vec![1, self.arch.cloud_feat])
        } else {
            self.encode_cloud(&obs.cloud)?
        };
        fuse(&f_s, &f_g, &f_pc, masked, &self.arch)
    }

    /// Generate one action chunk: encode, fuse (masked per stage), run
    /// the ancestral sampler, then map back to environment units with
    /// the quaternion renormalized and the gripper clamped.
    pub fn infer_action(
        &self,
        obs: &ConditioningSet,
        rng: &mut impl Rng,
    ) -> Result<ActionChunk> {
        let feature = self.condition(obs)?;
        let predictor = PolicyPredictor { policy: self };
        let flat = denoise_sample(
            &predictor,
            &feature.f_a,
            &self.schedule,
            self.arch.chunk_len(),
            rng,
        )?;
        let diff_chunk = ActionChunk::from_flat(
            self.arch.horizon,
            flat.data().iter().map(|v| v.as_f64()).collect(),
        )?;
        let mut chunk = self.normalizer.chunk_from_diffusion(&diff_chunk);
        for t in 0..chunk.horizon() {
            let mut a = chunk.action(t);
            let q = Quat::new(a[3], a[4], a[5], a[6]);
            let q = if q.norm() < 1e-9 {
                Quat::IDENTITY
            } else {
                q.normalized().canonicalized()
            };
            a[3] = q.w;
            a[4] = q.x;
            a[5] = q.y;
            a[6] = q.z;
            a[7] = a[7].clamp(0.0, 1.0);
            chunk.set_action(t, a);
        }
        Ok(chunk)
    }

    // ------------------------------------------------------------------
    // Persistence

    /// Write a checkpoint carrying all four parameter sets plus the
    /// architecture, normalizer, and schedule needed to rebuild.
    pub fn save(&self, path: &std::path::Path, step_count: u64, config_digest: &str) -> Result<()> {
        let mut tensors = std::collections::BTreeMap::new();
        for (set, _) in self.sets() {
            for (name, param) in set.iter() {
                tensors.insert(name.clone(), param.value.clone());
            }
        }
        let meta = CheckpointMeta {
            stage: self.stage.as_str().to_string(),
            step_count,
            schedule_hash: self.schedule.hash(),
            config_digest: config_digest.to_string(),
            extra: serde_json::json!({
                "arch": self.arch,
                "workspace": self.normalizer.workspace,
                "schedule": self.schedule,
            }),
        };
        write_checkpoint(path, &meta, &tensors)
    }

    fn sets(&self) -> [(&ParameterSet<S>, &'static str); 4] {
        [
            (&self.state_enc, STATE_PREFIX),
            (&self.guid_enc, GUID_PREFIX),
            (&self.cloud_enc, CLOUD_PREFIX),
            (&self.denoiser, DENOISER_PREFIX),
        ]
    }
}

impl ExpertPolicy<f32> {
    /// Load a policy checkpoint, verifying the schedule hash.
    pub fn load(path: &std::path::Path) -> Result<(ExpertPolicy<f32>, CheckpointMeta)> {
        let Checkpoint { meta, tensors } = read_checkpoint::<f32>(path)?;
        let arch: ExpertArch = serde_json::from_value(meta.extra["arch"].clone())
            .map_err(|e| Error::Validation(format!("checkpoint arch metadata: {e}")))?;
        let workspace: CropBox = serde_json::from_value(meta.extra["workspace"].clone())
            .map_err(|e| Error::Validation(format!("checkpoint workspace metadata: {e}")))?;
        let schedule: NoiseSchedule = serde_json::from_value(meta.extra["schedule"].clone())
            .map_err(|e| Error::Validation(format!("checkpoint schedule metadata: {e}")))?;
        if schedule.hash() != meta.schedule_hash {
            return Err(Error::State(format!(
                "schedule hash mismatch in {}: metadata {} vs tensors {}",
                path.display(),
                meta.schedule_hash,
                schedule.hash()
            )));
        }
        let stage = Stage::parse(&meta.stage)?;

        let mut policy = ExpertPolicy {
            arch,
            normalizer: Normalizer { workspace },
            schedule,
            stage,
            state_enc: ParameterSet::new(),
            guid_enc: ParameterSet::new(),
            cloud_enc: ParameterSet::new(),
            denoiser: ParameterSet::new(),
        };
        for (name, tensor) in tensors {
            let set = if name.starts_with("state.") {
                &mut policy.state_enc
            } else if name.starts_with("guid.") {
                &mut policy.guid_enc
            } else if name.starts_with("cloud.") {
                &mut policy.cloud_enc
            } else if name.starts_with("eps.") {
                &mut policy.denoiser
            } else {
                return Err(Error::Validation(format!(
                    "checkpoint tensor {name} has no known prefix"
                )));
            };
            set.insert(name, tensor);
        }
        Ok((policy, meta))
    }
}

struct PolicyPredictor<'a, S: Scalar> {
    policy: &'a ExpertPolicy<S>,
}

impl<'a, S: Scalar> NoisePredictor<S> for PolicyPredictor<'a, S> {
    fn predict(&self, a_k: &Tensor<S>, k: usize, f_a: &Tensor<S>) -> Result<Tensor<S>> {
        self.policy.predict_noise(a_k, k, f_a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::seed::derive_rng;

    fn tiny_arch() -> ExpertArch {
        ExpertArch {
            joints: 0,
            state_feat: 4,
            guid_feat: 4,
            cloud_feat: 8,
            cloud_hidden: 6,
            encoder_hidden: 6,
            denoiser_hidden: 16,
            denoiser_layers: 2,
            step_embed: 8,
            horizon: 2,
        }
    }

    fn workspace() -> CropBox {
        CropBox::new(Vec3::new(-0.5, -0.5, 0.0), Vec3::new(0.5, 0.5, 0.5)).unwrap()
    }

    fn tiny_policy(seed: u64) -> ExpertPolicy<f64> {
        ExpertPolicy::init(
            tiny_arch(),
            workspace(),
            make_schedule(5, 1e-4, 0.02).unwrap(),
            &mut derive_rng(seed, "policy", 0),
        )
    }

    fn sample_state() -> ProprioState {
        ProprioState {
            joint_positions: vec![],
            ee_pose: Pose::translation(Vec3::new(0.1, 0.0, 0.2)),
            gripper_state: 1.0,
        }
    }

    fn sample_guidance_pose() -> GuidancePose {
        GuidancePose {
            pose: Pose::translation(Vec3::new(0.2, 0.1, 0.15)),
            phase: 0.4,
        }
    }

    fn sample_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = derive_rng(seed, "cloud", 0);
        use rand::Rng;
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.gen_range(-0.4..0.4),
                        rng.gen_range(-0.4..0.4),
                        rng.gen_range(0.0..0.4),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_states_give_identical_features() {
        let p = tiny_policy(1);
        let a = p.encode_state(&sample_state()).unwrap();
        let b = p.encode_state(&sample_state()).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), &[1, 4]);
    }

    #[test]
    fn joint_count_mismatch_is_rejected() {
        let p = tiny_policy(1);
        let mut s = sample_state();
        s.joint_positions = vec![0.1, 0.2];
        assert!(matches!(p.encode_state(&s), Err(Error::Validation(_))));
    }

    #[test]
    fn phase_zero_and_one_guidance_differ() {
        let p = tiny_policy(1);
        let g0 = GuidancePose {
            pose: Pose::translation(Vec3::new(0.0, 0.0, 0.1)),
            phase: 0.0,
        };
        let g1 = GuidancePose {
            pose: Pose::translation(Vec3::new(0.3, 0.2, 0.3)),
            phase: 1.0,
        };
        let f0 = p.encode_guidance(&g0).unwrap();
        let f1 = p.encode_guidance(&g1).unwrap();
        assert_ne!(f0.data(), f1.data());
    }

    #[test]
    fn cloud_feature_is_permutation_invariant() {
        let p = tiny_policy(2);
        let cloud = sample_cloud(3, 32);
        let f = p.encode_cloud(&cloud).unwrap();
        let mut reversed = cloud.clone();
        reversed.points.reverse();
        let fr = p.encode_cloud(&reversed).unwrap();
        assert_eq!(f.data(), fr.data());
    }

    #[test]
    fn duplicated_point_equals_single_point() {
        let p = tiny_policy(2);
        let single = PointCloud::new(vec![Vec3::new(0.1, 0.1, 0.1)]).unwrap();
        let many =
            PointCloud::new(vec![Vec3::new(0.1, 0.1, 0.1); 17]).unwrap();
        let f1 = p.encode_cloud(&single).unwrap();
        let f2 = p.encode_cloud(&many).unwrap();
        assert_eq!(f1.data(), f2.data());
    }

    #[test]
    fn cloud_encoding_matches_bruteforce_per_point_max() {
        let p = tiny_policy(4);
        let cloud = sample_cloud(5, 4);
        let f = p.encode_cloud(&cloud).unwrap();

        // Brute force: encode each point alone, take componentwise max.
        let mut expected = vec![f64::NEG_INFINITY; p.arch.cloud_feat];
        for point in &cloud.points {
            let single = PointCloud::new(vec![*point]).unwrap();
            let fi = p.encode_cloud(&single).unwrap();
            for (e, &v) in expected.iter_mut().zip(fi.data()) {
                *e = e.max(v);
            }
        }
        for (a, b) in f.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_cloud_encodes_to_zeros() {
        let p = tiny_policy(2);
        let f = p.encode_cloud(&PointCloud::empty()).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_concatenates_and_masks() {
        let arch = tiny_arch();
        let f_s = Tensor::<f64>::from_vec(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f_g = Tensor::<f64>::from_vec(vec![1, 4], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let f_pc =
            Tensor::<f64>::from_vec(vec![1, 8], (0..8).map(|i| i as f64).collect()).unwrap();
        let fused = fuse(&f_s, &f_g, &f_pc, false, &arch).unwrap();
        assert_eq!(fused.f_a.shape(), &[1, 16]);
        assert_eq!(&fused.f_a.data()[..4], f_s.data());
        assert_eq!(&fused.f_a.data()[4..8], f_g.data());
        assert_eq!(&fused.f_a.data()[8..], f_pc.data());

        let masked = fuse(&f_s, &f_g, &f_pc, true, &arch).unwrap();
        assert!(masked.f_a.data()[8..].iter().all(|&v| v == 0.0));
        assert!(masked.f_pc.data().iter().all(|&v| v == 0.0));

        let bad = Tensor::<f64>::zeros(vec![1, 3]);
        assert!(fuse(&bad, &f_g, &f_pc, false, &arch).is_err());
    }

    #[test]
    fn masked_fusion_ignores_cloud_contents() {
        let p = tiny_policy(5);
        let obs_a = ConditioningSet {
            state: sample_state(),
            guidance: sample_guidance_pose(),
            cloud: sample_cloud(6, 16),
            cloud_masked: true,
        };
        let obs_b = ConditioningSet {
            cloud: sample_cloud(7, 24),
            ..obs_a.clone()
        };
        let fa = p.condition(&obs_a).unwrap();
        let fb = p.condition(&obs_b).unwrap();
        assert_eq!(fa.f_a.data(), fb.f_a.data());
    }

    #[test]
    fn predict_noise_has_chunk_shape_and_zero_params_give_zero() {
        let arch = tiny_arch();
        let mut p = tiny_policy(8);
        // Zero all denoiser parameters.
        let names: Vec<String> = p.denoiser.names().map(String::from).collect();
        for name in names {
            let param = p.denoiser.get_mut(&name).unwrap();
            let shape = param.value.shape().to_vec();
            param.value = Tensor::zeros(shape);
        }
        let a_k = Tensor::<f64>::randn(
            vec![1, arch.chunk_len()],
            &mut derive_rng(8, "chunk", 0),
        );
        let f_a = Tensor::<f64>::zeros(vec![1, arch.fused_len()]);
        let y = p.predict_noise(&a_k, 3, &f_a).unwrap();
        assert_eq!(y.shape(), &[1, arch.chunk_len()]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn infer_action_is_deterministic_under_seed() {
        let p = tiny_policy(9);
        let obs = ConditioningSet {
            state: sample_state(),
            guidance: sample_guidance_pose(),
            cloud: sample_cloud(10, 16),
            cloud_masked: false,
        };
        let a = p.infer_action(&obs, &mut derive_rng(11, "act", 0)).unwrap();
        let b = p.infer_action(&obs, &mut derive_rng(11, "act", 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inferred_quaternions_are_unit_and_gripper_clamped() {
        let p = tiny_policy(9);
        let obs = ConditioningSet {
            state: sample_state(),
            guidance: sample_guidance_pose(),
            cloud: PointCloud::empty(),
            cloud_masked: false,
        };
        let chunk = p.infer_action(&obs, &mut derive_rng(12, "act", 0)).unwrap();
        for a in chunk.actions() {
            let q = Quat::new(a[3], a[4], a[5], a[6]);
            assert!((q.norm() - 1.0).abs() <= 1e-9);
            assert!((0.0..=1.0).contains(&a[7]));
        }
    }

    #[test]
    fn pretrained_stage_inference_is_cloud_invariant() {
        let mut p = tiny_policy(13);
        p.stage = Stage::Pretrained;
        let base = ConditioningSet {
            state: sample_state(),
            guidance: sample_guidance_pose(),
            cloud: sample_cloud(14, 16),
            cloud_masked: false,
        };
        let a = p.infer_action(&base, &mut derive_rng(15, "act", 0)).unwrap();
        for i in 0..10 {
            let obs = ConditioningSet {
                cloud: sample_cloud(100 + i, 16),
                ..base.clone()
            };
            let b = p.infer_action(&obs, &mut derive_rng(15, "act", 0)).unwrap();
            assert_eq!(a, b, "cloud {i} changed the pretrained-stage output");
        }
    }

    #[test]
    fn policy_backward_twice_is_state_error() {
        let p = tiny_policy(16);
        let arch = p.arch.clone();
        let mut rng = derive_rng(16, "bb", 0);
        let cloud_t = Tensor::<f64>::randn(vec![8, 3], &mut rng);
        let batch = BatchTensors {
            state_rows: Tensor::randn(vec![2, arch.state_input()], &mut rng),
            guid_rows: Tensor::randn(vec![2, 8], &mut rng),
            clouds: vec![Some(&cloud_t), None],
            ks: vec![1, 3],
            a_k: Tensor::randn(vec![2, arch.chunk_len()], &mut rng),
            masked: false,
        };
        let (eps_hat, mut traces) = p.forward_batch(&batch).unwrap();
        let up = Tensor::zeros(eps_hat.shape().to_vec());
        p.backward_batch(&mut traces, &up).unwrap();
        assert!(matches!(
            p.backward_batch(&mut traces, &up),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn save_load_roundtrip_preserves_behavior() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.aeckpt");
        let mut p32: ExpertPolicy<f32> = ExpertPolicy::init(
            tiny_arch(),
            workspace(),
            make_schedule(5, 1e-4, 0.02).unwrap(),
            &mut derive_rng(17, "p32", 0),
        );
        p32.stage = Stage::Pretrained;
        p32.save(&path, 42, "digest").unwrap();
        let (loaded, meta) = ExpertPolicy::load(&path).unwrap();
        assert_eq!(meta.step_count, 42);
        assert_eq!(loaded.stage, Stage::Pretrained);

        let obs = ConditioningSet {
            state: sample_state(),
            guidance: sample_guidance_pose(),
            cloud: PointCloud::empty(),
            cloud_masked: false,
        };
        let a = p32.infer_action(&obs, &mut derive_rng(18, "a", 0)).unwrap();
        let b = loaded
            .infer_action(&obs, &mut derive_rng(18, "a", 0))
            .unwrap();
        assert_eq!(a, b);
    }
}
