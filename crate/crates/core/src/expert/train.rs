//! Two-stage training of the expert: action pre-training on pure
//! trajectory data with the cloud feature masked, then point-cloud
//! fine-tuning with the full conditioning vector and goal-noise
//! augmentation.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{BatchTensors, ExpertArch, ExpertPolicy, Normalizer, Stage};
use crate::config::RunConfig;
use crate::datastore::{DatasetStage, TrainingDataset, TrainingSample};
use crate::diffkernel::{adam_step, AdamConfig, Gradients, NonFinitePolicy, Scalar, Tensor};
use crate::diffusion::{make_schedule, mse_with_grad};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::seed::derive_rng;
use crate::trajectory::{fit_waypoints, perturb_goal, sample_guidance};

/// One scalar log record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub value: f64,
}

/// Output of a training stage.
#[derive(Debug)]
pub struct TrainResult {
    pub policy: ExpertPolicy<f32>,
    /// Training loss, one record per optimizer step.
    pub train_log: Vec<StepRecord>,
    /// Cloud-conditioned validation loss (step 0 included), evaluated
    /// every `val_interval` steps when the dataset has a val split.
    pub val_log: Vec<StepRecord>,
    /// Wall-clock milliseconds per logged step (not part of the
    /// deterministic outputs).
    pub timing: Vec<(u64, u128)>,
    /// Times goal-noise augmentation fell back to the clean guidance
    /// because refitting failed.
    pub augment_fallbacks: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FinetuneOptions {
    /// Train jointly from scratch instead of requiring a pretrained
    /// checkpoint (the joint-training baseline).
    pub from_scratch: bool,
}

/// Per-sample tensors staged once so the hot loop only copies rows.
struct Prepared<S: Scalar> {
    state_rows: Vec<Vec<S>>,
    guid_rows: Vec<[f64; 8]>,
    a0_rows: Vec<Vec<S>>,
    clouds: Vec<Option<Tensor<S>>>,
    ee: Vec<Vec3>,
    episode: Vec<usize>,
}

impl<S: Scalar> Prepared<S> {
    fn new(
        samples: &[TrainingSample],
        normalizer: &Normalizer,
        arch: &ExpertArch,
        policy: &ExpertPolicy<S>,
    ) -> Result<Prepared<S>> {
        let mut p = Prepared {
            state_rows: Vec::with_capacity(samples.len()),
            guid_rows: Vec::with_capacity(samples.len()),
            a0_rows: Vec::with_capacity(samples.len()),
            clouds: Vec::with_capacity(samples.len()),
            ee: Vec::with_capacity(samples.len()),
            episode: Vec::with_capacity(samples.len()),
        };
        for s in samples {
            if s.a0.horizon() != arch.horizon {
                return Err(Error::Validation(format!(
                    "sample horizon {} != policy horizon {}",
                    s.a0.horizon(),
                    arch.horizon
                )));
            }
            let state_row = normalizer.state_row(&s.state);
            if state_row.len() != arch.state_input() {
                return Err(Error::Validation(format!(
                    "state row width {} != expected {}",
                    state_row.len(),
                    arch.state_input()
                )));
            }
            p.state_rows
                .push(state_row.iter().map(|&v| S::from_f64(v)).collect());
            let g = normalizer.guid_row(&s.guidance);
            p.guid_rows.push(g.try_into().expect("guidance row is 8 wide"));
            let diff = normalizer.chunk_to_diffusion(&s.a0);
            p.a0_rows
                .push(diff.flat().iter().map(|&v| S::from_f64(v)).collect());
            p.clouds
                .push(s.cloud.as_ref().and_then(|c| policy.prepare_cloud(c)));
            p.ee.push(s.state.ee_pose.position);
            p.episode.push(s.episode);
        }
        Ok(p)
    }

    fn len(&self) -> usize {
        self.state_rows.len()
    }
}

struct LoopParams {
    batch: usize,
    steps: u64,
    masked: bool,
    /// Goal-noise augmentation scale (fine-tuning only).
    augment_sigma: Option<f64>,
    /// Update the cloud encoder (false keeps it at initialization).
    train_cloud: bool,
    rng_domain: &'static str,
}

fn run_loop(
    mut policy: ExpertPolicy<f32>,
    dataset: &TrainingDataset,
    cfg: &RunConfig,
    params: LoopParams,
) -> Result<TrainResult> {
    if dataset.train.is_empty() {
        return Err(Error::EmptyDataset("no training samples".to_string()));
    }
    let arch = policy.arch.clone();
    let train = Prepared::<f32>::new(&dataset.train, &policy.normalizer, &arch, &policy)?;
    let val = Prepared::<f32>::new(&dataset.val, &policy.normalizer, &arch, &policy)?;

    let adam = AdamConfig {
        lr: cfg.train.lr,
        beta1: cfg.train.adam_beta1,
        beta2: cfg.train.adam_beta2,
        eps: cfg.train.adam_eps,
        non_finite: NonFinitePolicy::SkipWithWarning,
    };
    let k_steps = policy.schedule.steps();
    let chunk_len = arch.chunk_len();
    let mut rng = derive_rng(cfg.seed, params.rng_domain, 0);

    let mut result = TrainResult {
        policy: ExpertPolicy::init(
            arch.clone(),
            policy.normalizer.workspace,
            policy.schedule.clone(),
            &mut derive_rng(0, "placeholder", 0),
        ),
        train_log: Vec::with_capacity(params.steps as usize),
        val_log: Vec::new(),
        timing: Vec::new(),
        augment_fallbacks: 0,
    };

    if !val.len() == 0 {}
    if val.len() > 0 {
        let v = validation_loss_prepared(&policy, &val, cfg.seed)?;
        result.val_log.push(StepRecord { step: 0, value: v });
    }

    let start = Instant::now();
    for step in 1..=params.steps {
        // Assemble the batch. Draw order per element: sample index,
        // diffusion step, noise, then augmentation draws.
        let b = params.batch;
        let mut state_rows = Tensor::<f32>::zeros(vec![b, arch.state_input()]);
        let mut guid_rows = Tensor::<f32>::zeros(vec![b, arch.guid_input()]);
        let mut a_k = Tensor::<f32>::zeros(vec![b, chunk_len]);
        let mut eps = Tensor::<f32>::zeros(vec![b, chunk_len]);
        let mut ks = Vec::with_capacity(b);
        let mut clouds: Vec<Option<&Tensor<f32>>> = Vec::with_capacity(b);

        for row in 0..b {
            let idx = rng.gen_range(0..train.len());
            let k = rng.gen_range(1..=k_steps);
            ks.push(k);
            let ab = policy.schedule.alpha_bar(k);
            let c0 = ab.sqrt() as f32;
            let c1 = (1.0 - ab).sqrt() as f32;
            let a0 = &train.a0_rows[idx];
            let er = eps.row_mut(row);
            for v in er.iter_mut() {
                *v = rng.sample::<f64, _>(StandardNormal) as f32;
            }
            for (j, v) in a_k.row_mut(row).iter_mut().enumerate() {
                *v = c0 * a0[j] + c1 * eps.row(row)[j];
            }
            state_rows.row_mut(row).copy_from_slice(&train.state_rows[idx]);

            let mut guid = train.guid_rows[idx];
            if let Some(sigma) = params.augment_sigma {
                if sigma > 0.0 {
                    let src = &dataset.guidance[train.episode[idx]];
                    let perturbed =
                        perturb_goal(&src.waypoints, sigma, src.workspace_diagonal, &mut rng)?;
                    match fit_waypoints(&perturbed) {
                        Ok(traj) => {
                            let g =
                                sample_guidance(&traj, train.ee[idx], dataset.lookahead);
                            guid = policy
                                .normalizer
                                .guid_row(&g)
                                .try_into()
                                .expect("guidance row is 8 wide");
                        }
                        Err(_) => result.augment_fallbacks += 1,
                    }
                }
            }
            for (v, g) in guid_rows.row_mut(row).iter_mut().zip(guid) {
                *v = g as f32;
            }
            clouds.push(if params.masked {
                None
            } else {
                train.clouds[idx].as_ref()
            });
        }

        let batch = BatchTensors {
            state_rows,
            guid_rows,
            clouds,
            ks,
            a_k,
            masked: params.masked,
        };
        let (eps_hat, mut traces) = policy.forward_batch(&batch)?;
        let (loss, d_eps) = mse_with_grad(&eps_hat, &eps)?;
        let mut grads = policy.backward_batch(&mut traces, &d_eps)?;

        if cfg.train.grad_clip > 0.0 {
            clip_policy_grads(&mut grads, cfg.train.grad_clip);
        }
        adam_step(&mut policy.state_enc, &grads.state, &adam)?;
        adam_step(&mut policy.guid_enc, &grads.guid, &adam)?;
        if params.train_cloud {
            adam_step(&mut policy.cloud_enc, &grads.cloud, &adam)?;
        }
        adam_step(&mut policy.denoiser, &grads.denoiser, &adam)?;

        result.train_log.push(StepRecord { step, value: loss });
        if step % cfg.train.log_interval == 0 || step == params.steps {
            result.timing.push((step, start.elapsed().as_millis()));
        }
        if val.len() > 0 && (step % cfg.train.val_interval == 0 || step == params.steps) {
            let v = validation_loss_prepared(&policy, &val, cfg.seed)?;
            result.val_log.push(StepRecord {
                step,
                value: v,
            });
        }
    }

    result.policy = policy;
    Ok(result)
}

fn clip_policy_grads(grads: &mut super::PolicyGrads<f32>, max_norm: f64) {
    // Global norm across all four parameter sets.
    let mut sq = 0.0f64;
    for g in [&grads.state, &grads.guid, &grads.cloud, &grads.denoiser] {
        for t in g.values() {
            for &v in t.data() {
                sq += (v as f64) * (v as f64);
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for g in [
            &mut grads.state,
            &mut grads.guid,
            &mut grads.cloud,
            &mut grads.denoiser,
        ] {
            for t in g.values_mut() {
                for v in t.data_mut() {
                    *v *= scale;
                }
            }
        }
    }
}

/// Pre-train on pure trajectory data: the cloud feature is masked for
/// every sample and the cloud encoder keeps its initialization.
pub fn train_pretrain(dataset: &TrainingDataset, cfg: &RunConfig) -> Result<TrainResult> {
    if dataset.train.is_empty() {
        return Err(Error::EmptyDataset("pre-training dataset is empty".into()));
    }
    let arch = ExpertArch::from_config(cfg);
    let schedule = make_schedule(
        cfg.schedule.steps,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )?;
    let policy = ExpertPolicy::<f32>::init(
        arch,
        cfg.world.workspace()?,
        schedule,
        &mut derive_rng(cfg.seed, "policy-init", 0),
    );
    let mut result = run_loop(
        policy,
        dataset,
        cfg,
        LoopParams {
            batch: cfg.train.pretrain_batch,
            steps: cfg.train.pretrain_steps,
            masked: true,
            augment_sigma: None,
            train_cloud: false,
            rng_domain: "pretrain",
        },
    )?;
    result.policy.stage = Stage::Pretrained;
    Ok(result)
}

/// Fine-tune with point clouds: full conditioning vector, all
/// parameter sets trainable, goal-noise augmentation applied per
/// sampled episode.
///
/// Requires a pretrained policy unless `from_scratch` is set (the
/// joint-training baseline, which starts from a fresh initialization).
pub fn train_finetune(
    base: ExpertPolicy<f32>,
    dataset: &TrainingDataset,
    cfg: &RunConfig,
    opts: FinetuneOptions,
) -> Result<TrainResult> {
    if dataset.stage != DatasetStage::Finetune {
        return Err(Error::Validation(
            "fine-tuning needs a dataset built with clouds".to_string(),
        ));
    }
    if dataset.train.iter().any(|s| s.cloud.is_none()) {
        return Err(Error::Validation(
            "fine-tuning dataset has samples without clouds".to_string(),
        ));
    }
    match (opts.from_scratch, base.stage) {
        (false, Stage::Pretrained) => {}
        (true, Stage::Initialized) => {}
        (false, other) => {
            return Err(Error::State(format!(
                "fine-tuning requires a pretrained checkpoint, got stage {}",
                other.as_str()
            )));
        }
        (true, other) => {
            return Err(Error::State(format!(
                "joint training starts from a fresh initialization, got stage {}",
                other.as_str()
            )));
        }
    }
    let mut result = run_loop(
        base,
        dataset,
        cfg,
        LoopParams {
            batch: cfg.train.finetune_batch,
            steps: cfg.train.finetune_steps,
            masked: false,
            augment_sigma: Some(cfg.train.sigma),
            train_cloud: true,
            rng_domain: if opts.from_scratch {
                "joint"
            } else {
                "finetune"
            },
        },
    )?;
    result.policy.stage = Stage::Finetuned;
    Ok(result)
}

/// Cloud-conditioned validation loss over a dataset's val split with
/// frozen per-sample noise, so checkpoints are comparable.
pub fn validation_loss(
    policy: &ExpertPolicy<f32>,
    dataset: &TrainingDataset,
    seed: u64,
) -> Result<f64> {
    let prep = Prepared::<f32>::new(&dataset.val, &policy.normalizer, &policy.arch, policy)?;
    validation_loss_prepared(policy, &prep, seed)
}

fn validation_loss_prepared<S: Scalar>(
    policy: &ExpertPolicy<S>,
    prep: &Prepared<S>,
    seed: u64,
) -> Result<f64> {
    if prep.len() == 0 {
        return Err(Error::EmptyDataset("no validation samples".to_string()));
    }
    let arch = &policy.arch;
    let chunk_len = arch.chunk_len();
    let k_steps = policy.schedule.steps();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk_start in (0..prep.len()).step_by(64) {
        let b = 64.min(prep.len() - chunk_start);
        let mut state_rows = Tensor::<S>::zeros(vec![b, arch.state_input()]);
        let mut guid_rows = Tensor::<S>::zeros(vec![b, arch.guid_input()]);
        let mut a_k = Tensor::<S>::zeros(vec![b, chunk_len]);
        let mut eps = Tensor::<S>::zeros(vec![b, chunk_len]);
        let mut ks = Vec::with_capacity(b);
        let mut clouds = Vec::with_capacity(b);
        for row in 0..b {
            let idx = chunk_start + row;
            // Frozen noise per val sample.
            let mut vrng = derive_rng(seed, "val-noise", idx as u64);
            let k = vrng.gen_range(1..=k_steps);
            ks.push(k);
            let ab = policy.schedule.alpha_bar(k);
            let c0 = S::from_f64(ab.sqrt());
            let c1 = S::from_f64((1.0 - ab).sqrt());
            for v in eps.row_mut(row).iter_mut() {
                *v = S::from_f64(vrng.sample::<f64, _>(StandardNormal));
            }
            let a0 = &prep.a0_rows[idx];
            for (j, v) in a_k.row_mut(row).iter_mut().enumerate() {
                *v = c0 * a0[j] + c1 * eps.row(row)[j];
            }
            state_rows.row_mut(row).copy_from_slice(&prep.state_rows[idx]);
            for (v, g) in guid_rows
                .row_mut(row)
                .iter_mut()
                .zip(prep.guid_rows[idx])
            {
                *v = S::from_f64(g);
            }
            clouds.push(prep.clouds[idx].as_ref());
        }
        let batch = BatchTensors {
            state_rows,
            guid_rows,
            clouds,
            ks,
            a_k,
            masked: false,
        };
        let (eps_hat, _traces) = policy.forward_batch(&batch)?;
        let (loss, _) = mse_with_grad(&eps_hat, &eps)?;
        total += loss * b as f64;
        count += b;
    }
    Ok(total / count as f64)
}

/// Report of the reverse-mode vs finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub params_checked: usize,
}

/// Compare reverse-mode gradients against central finite differences
/// (double precision, step 1e-4) over every parameter of every
/// encoder and the denoiser on a small policy with a fixed batch.
pub fn grad_check(arch: &ExpertArch, seed: u64) -> Result<GradCheckReport> {
    let workspace = crate::pointcloud::CropBox::new(
        Vec3::new(-0.5, -0.5, 0.0),
        Vec3::new(0.5, 0.5, 0.5),
    )?;
    let schedule = make_schedule(5, 1e-2, 0.1)?;
    let policy: ExpertPolicy<f64> = ExpertPolicy::init(
        arch.clone(),
        workspace,
        schedule,
        &mut derive_rng(seed, "gc-init", 0),
    );

    let mut rng = derive_rng(seed, "gc-data", 0);
    let b = 2usize;
    let cloud_a = Tensor::<f64>::randn(vec![5, 3], &mut rng);
    let cloud_b = Tensor::<f64>::randn(vec![3, 3], &mut rng);
    let batch = BatchTensors {
        state_rows: Tensor::randn(vec![b, arch.state_input()], &mut rng),
        guid_rows: Tensor::randn(vec![b, arch.guid_input()], &mut rng),
        clouds: vec![Some(&cloud_a), Some(&cloud_b)],
        ks: vec![2, 4],
        a_k: Tensor::randn(vec![b, arch.chunk_len()], &mut rng),
        masked: false,
    };
    let target = Tensor::<f64>::randn(vec![b, arch.chunk_len()], &mut rng);

    let loss_of = |p: &ExpertPolicy<f64>| -> Result<f64> {
        let (eps_hat, _) = p.forward_batch(&batch)?;
        Ok(mse_with_grad(&eps_hat, &target)?.0)
    };

    let (eps_hat, mut traces) = policy.forward_batch(&batch)?;
    let (_, d_eps) = mse_with_grad(&eps_hat, &target)?;
    let grads = policy.backward_batch(&mut traces, &d_eps)?;

    let h = 1e-4;
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let sets: [(&str, &Gradients<f64>); 4] = [
        ("state", &grads.state),
        ("guid", &grads.guid),
        ("cloud", &grads.cloud),
        ("eps", &grads.denoiser),
    ];
    for (set_name, grad_map) in sets {
        for (name, grad) in grad_map {
            for i in 0..grad.len() {
                let mut plus = policy.clone();
                let mut minus = policy.clone();
                {
                    let set = select_set_mut(&mut plus, set_name);
                    set.get_mut(name)?.value.data_mut()[i] += h;
                }
                {
                    let set = select_set_mut(&mut minus, set_name);
                    set.get_mut(name)?.value.data_mut()[i] -= h;
                }
                let fd = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * h);
                let ad = grad.data()[i];
                let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-3);
                max_rel = max_rel.max(rel);
                checked += 1;
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        params_checked: checked,
    })
}

fn select_set_mut<'a>(
    policy: &'a mut ExpertPolicy<f64>,
    name: &str,
) -> &'a mut crate::diffkernel::ParameterSet<f64> {
    match name {
        "state" => &mut policy.state_enc,
        "guid" => &mut policy.guid_enc,
        "cloud" => &mut policy.cloud_enc,
        _ => &mut policy.denoiser,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_check_passes_on_tiny_policy() {
        let arch = ExpertArch {
            joints: 0,
            state_feat: 4,
            guid_feat: 4,
            cloud_feat: 6,
            cloud_hidden: 5,
            encoder_hidden: 5,
            denoiser_hidden: 10,
            denoiser_layers: 2,
            step_embed: 4,
            horizon: 2,
        };
        let report = grad_check(&arch, 31).unwrap();
        assert!(
            report.max_rel_error <= 1e-4,
            "max rel error {}",
            report.max_rel_error
        );
        assert!(report.params_checked > 100);
    }
}
