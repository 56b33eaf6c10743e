//! Pipeline wiring behind the command-line interface: data
//! generation, annotation, the two training stages, evaluation sweeps,
//! and the ablations. Every run lives in a directory keyed by its
//! configuration digest, and every output is byte-reproducible from
//! the configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use action_expert::config::RunConfig;
use action_expert::datastore::{
    annotate_episode, build_dataset, read_episode, read_manifest, write_episode, write_manifest,
    DatasetStage, EpisodeMeta, EpisodeRecord, EpisodeStep, Manifest, ManifestEntry,
    TrainingDataset, FORMAT_VERSION,
};
use action_expert::diffusion::Action;
use action_expert::error::{Error, Result};
use action_expert::expert::{
    train_finetune, train_pretrain, ExpertArch, ExpertPolicy, FinetuneOptions, Stage, StepRecord,
    TrainResult,
};
use action_expert::seed::{derive_rng, derive_seed};
use action_expert::simworld::{
    run_episode, sample_scene, scripted_expert, Controller, EpisodeOptions, ExpertController,
    GuidanceMode, HoldController, OutcomeRecord, ReplayController, SplineFollowController,
    TaskKind, WorldParams,
};

/// Noise-scale grid of the ablation sweep.
pub const NOISE_GRID: [f64; 5] = [0.0, 0.05, 0.1, 0.2, 0.5];

/// Training seeds used by the ablation commands.
pub const ABLATION_SEEDS: usize = 3;

/// Directory layout of one run.
#[derive(Debug, Clone)]
pub struct RunDirs {
    pub root: PathBuf,
}

impl RunDirs {
    pub fn new(out_root: &Path, cfg: &RunConfig) -> RunDirs {
        RunDirs {
            root: out_root.join(cfg.digest_short()),
        }
    }

    pub fn episodes(&self) -> PathBuf {
        self.root.join("episodes")
    }

    pub fn annotations(&self) -> PathBuf {
        self.root.join("annotations")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results")
    }

    pub fn manifest(&self) -> PathBuf {
        self.episodes().join("manifest.json")
    }

    fn ensure(&self, sub: &Path) -> Result<()> {
        std::fs::create_dir_all(sub).map_err(|e| Error::io(sub.display().to_string(), e))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
}

/// `step<TAB>loss` per line; wall-clock timing goes to a sidecar file
/// so the metrics log is byte-stable across reruns.
fn write_metrics(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut text = String::with_capacity(records.len() * 24);
    for r in records {
        writeln!(text, "{}\t{:.6e}", r.step, r.value).expect("string write");
    }
    write_text(path, &text)
}

fn write_timing(path: &Path, timing: &[(u64, u128)]) -> Result<()> {
    let mut text = String::new();
    for (step, ms) in timing {
        writeln!(text, "{step}\t{ms}").expect("string write");
    }
    write_text(path, &text)
}

/// Run items 0..n through `f` on a small worker pool, preserving index
/// order in the output (deterministic regardless of worker count).
pub fn parallel_map<T: Send>(
    n: usize,
    workers: usize,
    f: impl Fn(usize) -> T + Sync,
) -> Vec<T> {
    let workers = workers.max(1).min(n.max(1));
    let mut out: Vec<Option<T>> = Vec::with_capacity(n);
    out.resize_with(n, || None);
    if workers == 1 {
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = Some(f(i));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<&mut Option<T>>> =
            out.iter_mut().map(std::sync::Mutex::new).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= n {
                        break;
                    }
                    let value = f(i);
                    **slots[i].lock().expect("slot lock") = Some(value);
                });
            }
        });
    }
    out.into_iter().map(|v| v.expect("all slots filled")).collect()
}

fn task_list(cfg: &RunConfig) -> Result<Vec<TaskKind>> {
    cfg.world.tasks.iter().map(|t| TaskKind::parse(t)).collect()
}

// ---------------------------------------------------------------------------
// gen-data

/// Generate scripted demonstrations for every configured task and
/// write them (plus the manifest) under the run directory.
pub fn cmd_gen_data(cfg: &RunConfig, dirs: &RunDirs, workers: usize) -> Result<Manifest> {
    cfg.validate()?;
    let params = WorldParams::from_config(cfg)?;
    let tasks = task_list(cfg)?;
    dirs.ensure(&dirs.episodes())?;

    struct Job {
        task: TaskKind,
        index: usize,
    }
    let jobs: Vec<Job> = tasks
        .iter()
        .flat_map(|&task| {
            (0..cfg.world.demos_per_task).map(move |index| Job { task, index })
        })
        .collect();

    let episodes: Vec<Result<(EpisodeRecord, u64, u64)>> =
        parallel_map(jobs.len(), workers, |j| {
            let job = &jobs[j];
            generate_episode(cfg, &params, job.task, job.index as u64)
        });

    let mut entries = Vec::with_capacity(jobs.len());
    for (i, ep) in episodes.into_iter().enumerate() {
        let (record, scene_seed, expert_seed) = ep.map_err(|e| {
            Error::Infeasible(format!(
                "generating demo {i} for task {}: {e}",
                jobs[i].task.as_str()
            ))
        })?;
        let stem = format!("ep_{i:05}");
        let (sha_ep, sha_clouds) = write_episode(&dirs.episodes(), &stem, &record)?;
        entries.push(ManifestEntry {
            file: format!("{stem}.aej"),
            task: jobs[i].task,
            scene_seed,
            expert_seed,
            steps: record.steps.len(),
            sha256_episode: sha_ep,
            sha256_clouds: sha_clouds,
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION.to_string(),
        config_digest: cfg.digest(),
        episodes: entries,
    };
    write_manifest(&dirs.manifest(), &manifest)?;
    Ok(manifest)
}

/// Generate one demonstration episode, resampling the scene (with a
/// salted seed) when the scripted expert reports infeasibility.
fn generate_episode(
    cfg: &RunConfig,
    params: &WorldParams,
    task: TaskKind,
    index: u64,
) -> Result<(EpisodeRecord, u64, u64)> {
    let domain_scene = format!("demo-scene/{}", task.as_str());
    let domain_expert = format!("demo-expert/{}", task.as_str());
    let mut last_err = None;
    for attempt in 0..20u64 {
        let scene_seed = derive_seed(cfg.seed, &domain_scene, index * 1000 + attempt);
        let expert_seed = derive_seed(cfg.seed, &domain_expert, index * 1000 + attempt);
        let (scene, spec) = match sample_scene(task, params, &mut derive_rng(scene_seed, "s", 0)) {
            Ok(out) => out,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        match scripted_expert(&scene, &spec, params, &mut derive_rng(expert_seed, "e", 0)) {
            Ok(demo) => {
                let mut clouds = Vec::with_capacity(demo.steps.len());
                let steps: Vec<EpisodeStep> = demo
                    .steps
                    .iter()
                    .map(|s| {
                        clouds.push(s.cloud.clone());
                        EpisodeStep {
                            state: s.state.clone(),
                            action: s.action,
                            cloud: (clouds.len() - 1) as u32,
                            gripper: s.gripper_cmd,
                        }
                    })
                    .collect();
                let record = EpisodeRecord {
                    meta: EpisodeMeta {
                        task: spec,
                        scene0: scene,
                        scene_seed,
                        expert_seed,
                        intrinsics: cfg.camera.intrinsics()?,
                        extrinsics: cfg.camera.extrinsics()?,
                        timestep: cfg.world.timestep,
                        cloud_points: cfg.world.cloud_points,
                    },
                    steps,
                    clouds,
                };
                return Ok((record, scene_seed, expert_seed));
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Infeasible("no attempt ran".into())))
}

/// Read every episode listed in the run's manifest.
pub fn load_episodes(dirs: &RunDirs) -> Result<Vec<EpisodeRecord>> {
    let manifest = read_manifest(&dirs.manifest())?;
    manifest
        .episodes
        .iter()
        .map(|e| read_episode(&dirs.episodes().join(&e.file)))
        .collect()
}

// ---------------------------------------------------------------------------
// annotate

/// Export per-episode annotations as inspectable JSON files.
pub fn cmd_annotate(cfg: &RunConfig, dirs: &RunDirs) -> Result<usize> {
    cfg.validate()?;
    let manifest = read_manifest(&dirs.manifest())?;
    dirs.ensure(&dirs.annotations())?;
    let mut count = 0;
    for entry in &manifest.episodes {
        let ep = read_episode(&dirs.episodes().join(&entry.file))?;
        let ann = annotate_episode(&ep, &ep.meta.intrinsics, &ep.meta.extrinsics)?;
        let stem = entry.file.trim_end_matches(".aej");
        let path = dirs.annotations().join(format!("{stem}.ann.json"));
        let json = serde_json::to_string_pretty(&ann)
            .map_err(|e| Error::Validation(format!("unserializable annotation: {e}")))?;
        write_text(&path, &json)?;
        count += 1;
    }
    Ok(count)
}

// ---------------------------------------------------------------------------
// training stages

fn dataset_for(
    cfg: &RunConfig,
    episodes: &[EpisodeRecord],
    stage: DatasetStage,
) -> Result<TrainingDataset> {
    build_dataset(
        episodes,
        &cfg.chunk,
        stage,
        cfg.train.lookahead,
        cfg.train.val_fraction,
        cfg.seed,
    )
}

/// Pre-train on trajectory data and write the checkpoint plus logs.
pub fn cmd_pretrain(cfg: &RunConfig, dirs: &RunDirs) -> Result<TrainResult> {
    cfg.validate()?;
    let episodes = load_episodes(dirs)?;
    let dataset = dataset_for(cfg, &episodes, DatasetStage::Pretrain)?;
    let result = train_pretrain(&dataset, cfg)?;
    dirs.ensure(&dirs.checkpoints())?;
    dirs.ensure(&dirs.logs())?;
    result.policy.save(
        &dirs.checkpoints().join("pretrained.aeckpt"),
        cfg.train.pretrain_steps,
        &cfg.digest(),
    )?;
    write_metrics(&dirs.logs().join("pretrain_metrics.log"), &result.train_log)?;
    write_timing(&dirs.logs().join("pretrain_timing.log"), &result.timing)?;
    Ok(result)
}

/// Fine-tune with point clouds (or train jointly from scratch) and
/// write the checkpoint plus logs.
pub fn cmd_finetune(cfg: &RunConfig, dirs: &RunDirs, joint: bool) -> Result<TrainResult> {
    cfg.validate()?;
    let episodes = load_episodes(dirs)?;
    let dataset = dataset_for(cfg, &episodes, DatasetStage::Finetune)?;
    let (base, opts) = if joint {
        let arch = ExpertArch::from_config(cfg);
        let schedule = action_expert::diffusion::make_schedule(
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
        (policy, FinetuneOptions { from_scratch: true })
    } else {
        let path = dirs.checkpoints().join("pretrained.aeckpt");
        if !path.exists() {
            return Err(Error::State(format!(
                "missing pretrained checkpoint {}; run `pretrain` first or pass --joint",
                path.display()
            )));
        }
        let (policy, _) = ExpertPolicy::load(&path)?;
        (policy, FinetuneOptions { from_scratch: false })
    };
    let result = train_finetune(base, &dataset, cfg, opts)?;
    dirs.ensure(&dirs.checkpoints())?;
    dirs.ensure(&dirs.logs())?;
    let name = if joint { "joint" } else { "finetuned" };
    result.policy.save(
        &dirs.checkpoints().join(format!("{name}.aeckpt")),
        cfg.train.finetune_steps,
        &cfg.digest(),
    )?;
    write_metrics(
        &dirs.logs().join(format!("{name}_metrics.log")),
        &result.train_log,
    )?;
    write_metrics(&dirs.logs().join(format!("{name}_val.log")), &result.val_log)?;
    write_timing(
        &dirs.logs().join(format!("{name}_timing.log")),
        &result.timing,
    )?;
    Ok(result)
}

// ---------------------------------------------------------------------------
// evaluation

/// Which controller an evaluation sweep drives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EvalPolicy {
    /// A trained expert checkpoint.
    Expert(PathBuf),
    /// Spline-follow baseline (guidance executed directly).
    Baseline,
    /// Replay of the scripted expert (oracle upper bound).
    Scripted,
    /// Hold the initial pose (sanity lower bound).
    Hold,
}

impl EvalPolicy {
    pub fn condition_name(&self) -> &'static str {
        match self {
            EvalPolicy::Expert(_) => "expert",
            EvalPolicy::Baseline => "baseline",
            EvalPolicy::Scripted => "scripted",
            EvalPolicy::Hold => "hold",
        }
    }
}

/// Evaluation sweep output.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub condition: String,
    pub records: Vec<OutcomeRecord>,
}

impl EvalReport {
    pub fn success_rate(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.success).count() as f64 / self.records.len() as f64
    }

    pub fn success_rate_for(&self, task: TaskKind) -> f64 {
        let of_task: Vec<_> = self.records.iter().filter(|r| r.task == task).collect();
        if of_task.is_empty() {
            return 0.0;
        }
        of_task.iter().filter(|r| r.success).count() as f64 / of_task.len() as f64
    }
}

/// Evaluate a policy over fresh seeded scenes for every configured
/// task. Scene and episode seeds derive from the config seed and the
/// `eval_salt`, so sweeps are reproducible and disjoint from training.
pub fn evaluate(
    cfg: &RunConfig,
    policy: &EvalPolicy,
    eval_salt: u64,
    workers: usize,
) -> Result<EvalReport> {
    cfg.validate()?;
    let params = WorldParams::from_config(cfg)?;
    let tasks = task_list(cfg)?;
    let opts = EpisodeOptions {
        execute: cfg.chunk.execute,
        lookahead: cfg.train.lookahead,
        guidance_mode: GuidanceMode::parse(&cfg.eval.guidance_mode)?,
        oracle_sigma: cfg.eval.oracle_sigma,
        oracle_waypoints: cfg.eval.oracle_waypoints,
    };
    let expert = match policy {
        EvalPolicy::Expert(path) => Some(ExpertPolicy::load(path)?.0),
        _ => None,
    };

    struct Job {
        task: TaskKind,
        index: usize,
    }
    let jobs: Vec<Job> = tasks
        .iter()
        .flat_map(|&task| (0..cfg.eval.episodes).map(move |index| Job { task, index }))
        .collect();

    let records: Vec<OutcomeRecord> = parallel_map(jobs.len(), workers, |j| {
        let job = &jobs[j];
        let scene_domain = format!("eval-scene/{}/{}", eval_salt, job.task.as_str());
        let ep_domain = format!("eval-episode/{}/{}", eval_salt, job.task.as_str());
        let scene_seed = derive_seed(cfg.seed, &scene_domain, job.index as u64);
        let episode_seed = derive_seed(cfg.seed, &ep_domain, job.index as u64);

        // Resample infeasible scenes with salted seeds.
        let mut sampled = None;
        for attempt in 0..20u64 {
            let s = derive_seed(scene_seed, "retry", attempt);
            if let Ok(out) = sample_scene(job.task, &params, &mut derive_rng(s, "s", 0)) {
                sampled = Some(out);
                break;
            }
        }
        let Some((scene, spec)) = sampled else {
            return OutcomeRecord {
                task: job.task,
                seed: episode_seed,
                success: false,
                steps: 0,
                collision: false,
                tracking_error: 0.0,
                error: Some("scene sampling failed".to_string()),
            };
        };

        let mut controller: Box<dyn Controller> = match policy {
            EvalPolicy::Expert(_) => Box::new(ExpertController {
                policy: expert.as_ref().expect("expert loaded"),
            }),
            EvalPolicy::Baseline => {
                Box::new(SplineFollowController::new(params.timestep, cfg.chunk.execute))
            }
            EvalPolicy::Scripted => {
                let demo = scripted_expert(
                    &scene,
                    &spec,
                    &params,
                    &mut derive_rng(episode_seed, "replay", 0),
                );
                match demo {
                    Ok(d) => Box::new(ReplayController::new(
                        d.steps.iter().map(|s| s.action).collect::<Vec<Action>>(),
                        cfg.chunk.execute,
                    )),
                    Err(e) => {
                        return OutcomeRecord {
                            task: job.task,
                            seed: episode_seed,
                            success: false,
                            steps: 0,
                            collision: false,
                            tracking_error: 0.0,
                            error: Some(e.to_string()),
                        }
                    }
                }
            }
            EvalPolicy::Hold => Box::new(HoldController {
                chunk: cfg.chunk.execute,
            }),
        };
        run_episode(
            controller.as_mut(),
            &scene,
            &spec,
            &params,
            &opts,
            episode_seed,
        )
    });

    Ok(EvalReport {
        condition: policy.condition_name().to_string(),
        records,
    })
}

/// Format evaluation records as the plain-text results table.
pub fn results_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    for report in reports {
        for r in &report.records {
            writeln!(
                out,
                "task={} condition={} seed={} success={} steps={} collision={} tracking={:.6} error={}",
                r.task.as_str(),
                report.condition,
                r.seed,
                u8::from(r.success),
                r.steps,
                u8::from(r.collision),
                r.tracking_error,
                r.error.as_deref().unwrap_or("-"),
            )
            .expect("string write");
        }
    }
    out
}

/// Per-task and overall success-rate summary.
pub fn summary_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    for report in reports {
        let mut tasks: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for r in &report.records {
            let e = tasks.entry(r.task.as_str()).or_insert((0, 0));
            e.0 += 1;
            e.1 += usize::from(r.success);
        }
        for (task, (n, wins)) in &tasks {
            writeln!(
                out,
                "task={task} condition={} episodes={n} successes={wins} rate={:.4}",
                report.condition,
                *wins as f64 / *n as f64
            )
            .expect("string write");
        }
        writeln!(
            out,
            "overall condition={} episodes={} successes={} rate={:.4}",
            report.condition,
            report.records.len(),
            report.records.iter().filter(|r| r.success).count(),
            report.success_rate()
        )
        .expect("string write");
    }
    out
}

/// Evaluate and write the results and summary tables.
pub fn cmd_eval(
    cfg: &RunConfig,
    dirs: &RunDirs,
    policy: &EvalPolicy,
    workers: usize,
) -> Result<EvalReport> {
    let report = evaluate(cfg, policy, 0, workers)?;
    dirs.ensure(&dirs.results())?;
    let reports = [report];
    write_text(
        &dirs
            .results()
            .join(format!("eval_{}_results.txt", reports[0].condition)),
        &results_table(&reports),
    )?;
    write_text(
        &dirs
            .results()
            .join(format!("eval_{}_summary.txt", reports[0].condition)),
        &summary_table(&reports),
    )?;
    let [report] = reports;
    Ok(report)
}

// ---------------------------------------------------------------------------
// ablations

/// One (sigma, seed) cell of the noise ablation.
#[derive(Debug, Clone)]
pub struct NoiseCell {
    pub sigma: f64,
    pub seed_index: usize,
    pub report: EvalReport,
}

/// Sweep the goal-noise training scale over `NOISE_GRID` (or a custom
/// grid), training `seeds` policies per scale and evaluating each on
/// the mixed task suite under the perturbed oracle.
pub fn cmd_ablate_noise(
    cfg: &RunConfig,
    dirs: &RunDirs,
    grid: &[f64],
    seeds: usize,
    workers: usize,
) -> Result<Vec<NoiseCell>> {
    cfg.validate()?;
    let episodes = load_episodes(dirs)?;
    let mut cells = Vec::new();
    for seed_index in 0..seeds {
        let mut seed_cfg = cfg.clone();
        seed_cfg.seed = derive_seed(cfg.seed, "ablate-noise-seed", seed_index as u64);
        let pre_dataset = dataset_for(&seed_cfg, &episodes, DatasetStage::Pretrain)?;
        let pretrained = train_pretrain(&pre_dataset, &seed_cfg)?;
        let fine_dataset = dataset_for(&seed_cfg, &episodes, DatasetStage::Finetune)?;
        for &sigma in grid {
            let mut cell_cfg = seed_cfg.clone();
            cell_cfg.train.sigma = sigma;
            let result = train_finetune(
                pretrained.policy.clone(),
                &fine_dataset,
                &cell_cfg,
                FinetuneOptions::default(),
            )?;
            dirs.ensure(&dirs.checkpoints())?;
            let ckpt = dirs.checkpoints().join(format!(
                "ablate_noise_s{seed_index}_sigma{}.aeckpt",
                sigma_tag(sigma)
            ));
            result
                .policy
                .save(&ckpt, cell_cfg.train.finetune_steps, &cell_cfg.digest())?;
            let report = evaluate(
                &cell_cfg,
                &EvalPolicy::Expert(ckpt),
                derive_seed(cfg.seed, "ablate-noise-eval", seed_index as u64),
                workers,
            )?;
            cells.push(NoiseCell {
                sigma,
                seed_index,
                report,
            });
        }
    }

    dirs.ensure(&dirs.results())?;
    write_text(
        &dirs.results().join("ablate_noise_summary.txt"),
        &noise_summary(cfg, &cells)?,
    )?;
    Ok(cells)
}

fn sigma_tag(sigma: f64) -> String {
    format!("{sigma:.2}").replace('.', "p")
}

/// Per-cell and seed-averaged success rates of the noise sweep.
pub fn noise_summary(cfg: &RunConfig, cells: &[NoiseCell]) -> Result<String> {
    let tasks = task_list(cfg)?;
    let mut out = String::new();
    for cell in cells {
        let mut line = format!(
            "sigma={:.2} seed={} overall={:.4}",
            cell.sigma,
            cell.seed_index,
            cell.report.success_rate()
        );
        for t in &tasks {
            write!(line, " {}={:.4}", t.as_str(), cell.report.success_rate_for(*t))
                .expect("string write");
        }
        writeln!(out, "{line}").expect("string write");
    }
    let mut grid: Vec<f64> = cells.iter().map(|c| c.sigma).collect();
    grid.dedup();
    writeln!(out, "--").expect("string write");
    for sigma in grid {
        let of_sigma: Vec<&NoiseCell> =
            cells.iter().filter(|c| c.sigma == sigma).collect();
        let mean = of_sigma
            .iter()
            .map(|c| c.report.success_rate())
            .sum::<f64>()
            / of_sigma.len() as f64;
        writeln!(out, "sigma={sigma:.2} seed_mean={mean:.4}").expect("string write");
    }
    Ok(out)
}

/// One seed of the training-strategy ablation.
#[derive(Debug, Clone)]
pub struct AppfCell {
    pub seed_index: usize,
    /// Final cloud-conditioned validation loss of the joint run.
    pub joint_final_val: f64,
    /// Cloud-conditioned steps the joint run took (its full length).
    pub joint_steps: u64,
    /// Cloud-conditioned steps the fine-tuning stage needed to match
    /// the joint run's final validation loss (None if never reached).
    pub appf_steps_to_match: Option<u64>,
}

/// Compare two-stage training against joint training from scratch:
/// how many cloud-conditioned optimizer steps each needs to reach the
/// joint run's final validation loss.
pub fn cmd_ablate_appf(
    cfg: &RunConfig,
    dirs: &RunDirs,
    seeds: usize,
) -> Result<Vec<AppfCell>> {
    cfg.validate()?;
    if cfg.train.val_fraction <= 0.0 {
        return Err(Error::validation(
            "the training-strategy ablation needs val_fraction > 0",
        ));
    }
    let episodes = load_episodes(dirs)?;
    let mut cells = Vec::new();
    for seed_index in 0..seeds {
        let mut seed_cfg = cfg.clone();
        seed_cfg.seed = derive_seed(cfg.seed, "ablate-appf-seed", seed_index as u64);
        let fine_dataset = dataset_for(&seed_cfg, &episodes, DatasetStage::Finetune)?;
        if fine_dataset.val.is_empty() {
            return Err(Error::validation(
                "validation split is empty; raise demos_per_task or val_fraction",
            ));
        }

        // Joint baseline: from-scratch training with clouds.
        let arch = ExpertArch::from_config(&seed_cfg);
        let schedule = action_expert::diffusion::make_schedule(
            seed_cfg.schedule.steps,
            seed_cfg.schedule.beta_start,
            seed_cfg.schedule.beta_end,
        )?;
        let fresh = ExpertPolicy::<f32>::init(
            arch,
            seed_cfg.world.workspace()?,
            schedule,
            &mut derive_rng(seed_cfg.seed, "policy-init", 0),
        );
        let joint = train_finetune(
            fresh,
            &fine_dataset,
            &seed_cfg,
            FinetuneOptions { from_scratch: true },
        )?;
        let joint_final_val = joint
            .val_log
            .last()
            .map(|r| r.value)
            .ok_or_else(|| Error::validation("joint run produced no validation records"))?;

        // Two-stage run on the same data and budget.
        let pre_dataset = dataset_for(&seed_cfg, &episodes, DatasetStage::Pretrain)?;
        let pretrained = train_pretrain(&pre_dataset, &seed_cfg)?;
        let appf = train_finetune(
            pretrained.policy,
            &fine_dataset,
            &seed_cfg,
            FinetuneOptions::default(),
        )?;
        let appf_steps_to_match = appf
            .val_log
            .iter()
            .find(|r| r.value <= joint_final_val)
            .map(|r| r.step);

        cells.push(AppfCell {
            seed_index,
            joint_final_val,
            joint_steps: seed_cfg.train.finetune_steps,
            appf_steps_to_match,
        });
    }

    dirs.ensure(&dirs.results())?;
    write_text(
        &dirs.results().join("ablate_appf_summary.txt"),
        &appf_summary(&cells),
    )?;
    Ok(cells)
}

pub fn appf_summary(cells: &[AppfCell]) -> String {
    let mut out = String::new();
    let mut ratios = Vec::new();
    for c in cells {
        let matched = c
            .appf_steps_to_match
            .map(|s| s.to_string())
            .unwrap_or_else(|| "never".to_string());
        let ratio = c
            .appf_steps_to_match
            .map(|s| s as f64 / c.joint_steps as f64)
            .unwrap_or(f64::INFINITY);
        ratios.push(ratio);
        writeln!(
            out,
            "seed={} joint_steps={} joint_final_val={:.6} appf_steps_to_match={} ratio={:.4}",
            c.seed_index, c.joint_steps, c.joint_final_val, matched, ratio
        )
        .expect("string write");
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
    writeln!(out, "mean_ratio={mean:.4}").expect("string write");
    out
}

// ---------------------------------------------------------------------------
// grad-check

/// The small fixed architecture the gradient check runs on.
pub fn grad_check_arch() -> ExpertArch {
    ExpertArch {
        joints: 0,
        state_feat: 6,
        guid_feat: 6,
        cloud_feat: 10,
        cloud_hidden: 8,
        encoder_hidden: 8,
        denoiser_hidden: 24,
        denoiser_layers: 3,
        step_embed: 8,
        horizon: 3,
    }
}

/// Make sure the finetuned checkpoint exists and is loadable, used by
/// eval-style commands before doing heavy work.
pub fn expect_checkpoint(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::State(format!(
            "missing checkpoint {}; run the training commands first",
            path.display()
        )));
    }
    let (_, meta) = ExpertPolicy::load(path)?;
    Stage::parse(&meta.stage)?;
    Ok(())
}
