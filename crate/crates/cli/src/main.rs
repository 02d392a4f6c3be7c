use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand};
use coarse2fine::control::ControllerKind;
use coarse2fine::policy::{ArchSpec, Modality, TrainConfig};
use coarse2fine_cli::commands::{self, default_threads, parse_modalities, parse_task, read_json_config, DataKind, EvalArgs, GenDataArgs, PoseSourceKind, TrainArgs};
use coarse2fine_cli::sweep::{self, parse_task_list, Preset, SweepOptions};

#[derive(Parser)]
#[command(name = "coarse2fine", version, about = "Coarse-to-fine insertion: data, training, evaluation and sweeps")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a fine, end-to-end or initialisation dataset.
    GenData(GenDataCmd),
    /// Train a policy or initialisation network on a dataset.
    Train(TrainCmd),
    /// Evaluate a controller on seeded initial poses and append to metrics.csv.
    Eval(EvalCmd),
    /// Run an experiment preset; re-running the same command resumes it.
    Sweep(SweepCmd),
}

fn task_name(s: &str) -> Result<String, String> {
    coarse2fine::tasks::TaskKind::parse(s).map(|_| s.to_string()).ok_or_else(|| format!("unknown task `{s}` (expected round, square or screw)"))
}

fn data_kind(s: &str) -> Result<DataKind, String> {
    DataKind::parse(s).ok_or_else(|| "expected fine, end_to_end or init".to_string())
}

fn arch(s: &str) -> Result<ArchSpec, String> {
    ArchSpec::parse(s).ok_or_else(|| "expected keypoint_recon, keypoint, conv_recon or conv".to_string())
}

fn modality(s: &str) -> Result<Modality, String> {
    Modality::parse(s).ok_or_else(|| "expected rgb, stereo_ir, depth or grayscale".to_string())
}

fn controller(s: &str) -> Result<ControllerKind, String> {
    ControllerKind::parse(s).ok_or_else(|| "expected coarse_to_fine, icp_only or end_to_end".to_string())
}

fn pose_source(s: &str) -> Result<PoseSourceKind, String> {
    PoseSourceKind::parse(s).ok_or_else(|| "expected learned, centroid or ground_truth".to_string())
}

fn preset(s: &str) -> Result<Preset, String> {
    Preset::parse(s).ok_or_else(|| "expected fig3, modality, architecture or robustness".to_string())
}

#[derive(Args)]
struct GenDataCmd {
    #[arg(long, value_parser = task_name)]
    task: String,
    #[arg(long)]
    tolerance_mm: Option<f64>,
    #[arg(long, value_parser = data_kind, default_value = "fine")]
    kind: DataKind,
    #[arg(long)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON config with a schema_version field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated observation streams, e.g. rgb,depth.
    #[arg(long)]
    modalities: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_parser = arch, default_value = "keypoint_recon")]
    arch: ArchSpec,
    #[arg(long, value_parser = modality, default_value = "rgb")]
    modality: Modality,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Train on the first N frames only.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long, value_parser = task_name)]
    task: String,
    #[arg(long)]
    tolerance_mm: Option<f64>,
    #[arg(long, value_parser = controller, default_value = "coarse_to_fine")]
    controller: ControllerKind,
    /// Fine-policy (or end-to-end) checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = pose_source)]
    pose_source: Option<PoseSourceKind>,
    #[arg(long, default_value_t = 20)]
    poses: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated: distractors, moving_light.
    #[arg(long, default_value = "")]
    robustness: String,
    #[arg(long, default_value_t = 5)]
    distractor_count: usize,
    #[arg(long, default_value_t = 1.0)]
    speed_scale: f64,
    #[arg(long, default_value_t = 3.0)]
    bias_mm: f64,
    #[arg(long, default_value_t = 1.0)]
    bias_deg: f64,
    /// Render evaluation episodes without visual randomisation.
    #[arg(long)]
    no_randomize: bool,
    /// Feed perfect depth to the pose estimator.
    #[arg(long)]
    no_depth_artifacts: bool,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long)]
    experiment_id: Option<String>,
}

#[derive(Args)]
struct SweepCmd {
    #[arg(long, value_parser = preset)]
    preset: Preset,
    #[arg(long)]
    out: PathBuf,
    /// Dataset sizes {10,50,100,150}k instead of the desk-scale defaults.
    #[arg(long)]
    paper_scale: bool,
    /// Comma-separated dataset sizes, overriding the preset.
    #[arg(long, value_delimiter = ',')]
    frames: Option<Vec<usize>>,
    /// Comma-separated tasks, e.g. `round,square:0.5`.
    #[arg(long)]
    tasks: Option<String>,
    #[arg(long, default_value_t = 20)]
    poses: usize,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 2000)]
    init_samples: usize,
    #[arg(long, value_parser = pose_source, default_value = "learned")]
    pose_source: PoseSourceKind,
    /// Stop after this many steps (the state file allows resuming).
    #[arg(long)]
    max_steps: Option<usize>,
}

fn run(cli: Cli) -> Result<()> {
    let threads = default_threads();
    match cli.cmd {
        Cmd::GenData(c) => {
            let a = GenDataArgs {
                task: parse_task(&c.task, c.tolerance_mm)?,
                kind: c.kind,
                frames: c.frames,
                seed: c.seed,
                config: c.config.as_deref().map(read_json_config).transpose()?,
                modalities: c.modalities.as_deref().map(parse_modalities).transpose()?,
                out: c.out,
                threads,
            };
            let s = commands::gen_data(&a)?;
            println!("{} frames in {} episodes ({} successful), config hash {}", s.frames, s.episodes, s.successes, s.config_hash);
        }
        Cmd::Train(c) => {
            let mut train = TrainConfig::default();
            if let Some(b) = c.batch {
                train.batch = b;
            }
            if let Some(lr) = c.lr {
                train.adam.lr = lr;
            }
            let s = commands::train(&TrainArgs {
                dataset: c.dataset,
                arch: c.arch,
                modality: c.modality,
                epochs: c.epochs,
                seed: c.seed,
                out: c.out,
                frames: c.frames,
                train,
            })?;
            println!("{} model on {} frames: loss {:.6} -> {:.6}", s.role, s.frames, s.first_loss, s.final_loss);
        }
        Cmd::Eval(c) => {
            let mut distractors = 0;
            let mut moving_light = false;
            for f in c.robustness.split(',').map(str::trim).filter(|f| !f.is_empty()) {
                match f {
                    "distractors" => distractors = c.distractor_count,
                    "moving_light" => moving_light = true,
                    other => return Err(anyhow!("unknown robustness flag `{other}` (expected distractors, moving_light)")),
                }
            }
            let (row, _) = commands::eval(&EvalArgs {
                task: parse_task(&c.task, c.tolerance_mm)?,
                controller: c.controller,
                checkpoint: c.checkpoint,
                init_checkpoint: c.init_checkpoint,
                pose_source: c.pose_source,
                poses: c.poses,
                seed: c.seed,
                distractors,
                moving_light,
                speed_scale: c.speed_scale,
                bias: [c.bias_mm / 1000.0, c.bias_deg.to_radians()],
                randomize: !c.no_randomize,
                depth_artifacts: !c.no_depth_artifacts,
                out: c.out,
                experiment_id: c.experiment_id,
                threads,
            })?;
            println!(
                "{} {}: success {:.2} ({} poses), mean steps {:.1}, mean final error {:.2} mm",
                row.experiment_id, row.controller, row.success_rate, c.poses, row.mean_steps, row.mean_final_err_mm
            );
        }
        Cmd::Sweep(c) => {
            let mut o = SweepOptions::new(c.preset, c.out);
            o.paper_scale = c.paper_scale;
            o.frames = c.frames;
            o.tasks = c.tasks.as_deref().map(parse_task_list).transpose()?;
            o.poses = c.poses;
            o.seeds = c.seeds;
            o.epochs = c.epochs;
            o.init_samples = c.init_samples;
            o.pose_source = c.pose_source;
            o.threads = threads;
            o.max_steps = c.max_steps;
            let r = sweep::run_sweep(&o)?;
            if r.finished {
                println!("sweep complete: {} rows in {}", r.rows.len(), o.out.join("metrics.csv").display());
            } else {
                println!("sweep paused after {} steps, {} remaining; re-run the same command to resume", r.ran, r.remaining);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
