use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use action_expert::config::RunConfig;
use action_expert::error::{Error, Result};
use action_expert_cli::{
    cmd_ablate_appf, cmd_ablate_noise, cmd_annotate, cmd_eval, cmd_finetune, cmd_gen_data,
    cmd_pretrain, grad_check_arch, EvalPolicy, RunDirs, ABLATION_SEEDS, NOISE_GRID,
};

/// Trajectory-guided diffusion action expert: data generation,
/// training, evaluation, and ablations in a synthetic desk world.
#[derive(Parser)]
#[command(name = "action-expert", version, about)]
struct Cli {
    /// TOML configuration file (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output root; runs live in `<out-root>/<config-digest>/`.
    /// Defaults to $AE_OUT_ROOT or `runs`.
    #[arg(long, global = true)]
    out_root: Option<PathBuf>,

    /// Worker threads for episode generation and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// Regenerate outputs even when they already exist.
    #[arg(long, global = true)]
    force: bool,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Config fields overridable from the command line.
#[derive(Args)]
struct Overrides {
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Demonstrations per task.
    #[arg(long, global = true)]
    demos: Option<usize>,
    /// Goal-noise augmentation scale for fine-tuning.
    #[arg(long, global = true)]
    sigma: Option<f64>,
    /// Pre-training optimizer steps.
    #[arg(long, global = true)]
    pretrain_steps: Option<u64>,
    /// Fine-tuning optimizer steps.
    #[arg(long, global = true)]
    finetune_steps: Option<u64>,
    /// Evaluation episodes per task.
    #[arg(long, global = true)]
    episodes: Option<usize>,
    /// Waypoint-oracle noise at evaluation time.
    #[arg(long, global = true)]
    oracle_sigma: Option<f64>,
    /// Comma-separated task list.
    #[arg(long, global = true)]
    tasks: Option<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.demos {
            cfg.world.demos_per_task = v;
        }
        if let Some(v) = self.sigma {
            cfg.train.sigma = v;
        }
        if let Some(v) = self.pretrain_steps {
            cfg.train.pretrain_steps = v;
        }
        if let Some(v) = self.finetune_steps {
            cfg.train.finetune_steps = v;
        }
        if let Some(v) = self.episodes {
            cfg.eval.episodes = v;
        }
        if let Some(v) = self.oracle_sigma {
            cfg.eval.oracle_sigma = v;
        }
        if let Some(tasks) = &self.tasks {
            cfg.world.tasks = tasks.split(',').map(|t| t.trim().to_string()).collect();
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted demonstrations and the episode manifest.
    GenData,
    /// Export per-episode camera annotations as JSON.
    Annotate,
    /// Action pre-training on trajectory data (cloud feature masked).
    Pretrain,
    /// Point-cloud fine-tuning (or joint training with --joint).
    Finetune {
        /// Train jointly from scratch instead of loading the
        /// pretrained checkpoint.
        #[arg(long)]
        joint: bool,
    },
    /// Evaluate a policy over fresh seeded scenes.
    Eval {
        /// One of: expert, baseline, scripted, hold.
        #[arg(long, default_value = "expert")]
        policy: String,
        /// Checkpoint for --policy expert (defaults to the run's
        /// finetuned checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep the goal-noise training scale over the default grid.
    AblateNoise {
        /// Training seeds per noise scale.
        #[arg(long, default_value_t = ABLATION_SEEDS)]
        train_seeds: usize,
        /// Comma-separated sigma grid (defaults to 0,0.05,0.1,0.2,0.5).
        #[arg(long)]
        grid: Option<String>,
    },
    /// Compare two-stage training against joint training from scratch.
    AblateAppf {
        /// Training seeds.
        #[arg(long, default_value_t = ABLATION_SEEDS)]
        train_seeds: usize,
    },
    /// Check reverse-mode gradients against finite differences.
    GradCheck,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn out_root(cli: &Cli) -> PathBuf {
    cli.out_root.clone().unwrap_or_else(|| {
        std::env::var_os("AE_OUT_ROOT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
    })
}

/// Idempotency gate: refuse to redo work whose output already exists
/// unless --force is given.
fn exists_notice(force: bool, path: &std::path::Path, what: &str) -> bool {
    if !force && path.exists() {
        println!(
            "{what} already exists at {} (same config digest); use --force to regenerate",
            path.display()
        );
        return true;
    }
    false
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let dirs = RunDirs::new(&out_root(cli), &cfg);
    println!("run directory: {}", dirs.root.display());

    match &cli.command {
        Command::GenData => {
            if exists_notice(cli.force, &dirs.manifest(), "episode manifest") {
                return Ok(());
            }
            let manifest = cmd_gen_data(&cfg, &dirs, cli.workers)?;
            println!(
                "generated {} episodes across {} tasks",
                manifest.episodes.len(),
                cfg.world.tasks.len()
            );
        }
        Command::Annotate => {
            let n = cmd_annotate(&cfg, &dirs)?;
            println!(
                "annotated {n} episodes into {}",
                dirs.annotations().display()
            );
        }
        Command::Pretrain => {
            let ckpt = dirs.checkpoints().join("pretrained.aeckpt");
            if exists_notice(cli.force, &ckpt, "pretrained checkpoint") {
                return Ok(());
            }
            let result = cmd_pretrain(&cfg, &dirs)?;
            let last = result.train_log.last().map(|r| r.value).unwrap_or(f64::NAN);
            println!(
                "pre-trained {} steps (final loss {last:.6}); checkpoint at {}",
                cfg.train.pretrain_steps,
                ckpt.display()
            );
        }
        Command::Finetune { joint } => {
            let name = if *joint { "joint" } else { "finetuned" };
            let ckpt = dirs.checkpoints().join(format!("{name}.aeckpt"));
            if exists_notice(cli.force, &ckpt, "checkpoint") {
                return Ok(());
            }
            let result = cmd_finetune(&cfg, &dirs, *joint)?;
            let last = result.train_log.last().map(|r| r.value).unwrap_or(f64::NAN);
            println!(
                "trained {} steps (final loss {last:.6}); checkpoint at {}",
                cfg.train.finetune_steps,
                ckpt.display()
            );
        }
        Command::Eval { policy, checkpoint } => {
            let policy = match policy.as_str() {
                "expert" => {
                    let path = checkpoint
                        .clone()
                        .unwrap_or_else(|| dirs.checkpoints().join("finetuned.aeckpt"));
                    action_expert_cli::expect_checkpoint(&path)?;
                    EvalPolicy::Expert(path)
                }
                "baseline" => EvalPolicy::Baseline,
                "scripted" => EvalPolicy::Scripted,
                "hold" => EvalPolicy::Hold,
                other => {
                    return Err(Error::Validation(format!(
                        "unknown eval policy {other:?} (expert|baseline|scripted|hold)"
                    )));
                }
            };
            let report = cmd_eval(&cfg, &dirs, &policy, cli.workers)?;
            println!(
                "evaluated {} episodes: success rate {:.4} (tables in {})",
                report.records.len(),
                report.success_rate(),
                dirs.results().display()
            );
        }
        Command::AblateNoise { train_seeds, grid } => {
            let grid: Vec<f64> = match grid {
                None => NOISE_GRID.to_vec(),
                Some(g) => g
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<f64>()
                            .map_err(|e| Error::Validation(format!("bad sigma {s:?}: {e}")))
                    })
                    .collect::<Result<_>>()?,
            };
            let cells = cmd_ablate_noise(&cfg, &dirs, &grid, *train_seeds, cli.workers)?;
            println!(
                "noise ablation finished: {} cells; summary in {}",
                cells.len(),
                dirs.results().join("ablate_noise_summary.txt").display()
            );
        }
        Command::AblateAppf { train_seeds } => {
            let cells = cmd_ablate_appf(&cfg, &dirs, *train_seeds)?;
            println!(
                "training-strategy ablation finished over {} seeds; summary in {}",
                cells.len(),
                dirs.results().join("ablate_appf_summary.txt").display()
            );
        }
        Command::GradCheck => {
            let report = action_expert::expert::grad_check(&grad_check_arch(), cfg.seed)?;
            println!(
                "gradient check: {} parameters, max relative error {:.3e}",
                report.params_checked, report.max_rel_error
            );
            if report.max_rel_error > 1e-4 {
                return Err(Error::Validation(format!(
                    "gradient check failed: max relative error {:.3e} > 1e-4",
                    report.max_rel_error
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
