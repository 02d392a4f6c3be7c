//! The three primitive commands: dataset generation, training and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use coarse2fine::control::{run_suite, ControllerKind, Controllers, EpisodeOutcome, EpisodeSettings, EvalSuite, FineController, PoseSource, Sensors};
use coarse2fine::domain_rand::{DepthArtifactConfig, RngStream};
use coarse2fine::geometry::SpeedCap;
use coarse2fine::policy::{ArchSpec, Modality, NetConfig, Policy, PolicyNet, TrainConfig};
use coarse2fine::tasks::demos::{demo_training_set, init_training_set};
use coarse2fine::tasks::{generate_demos, generate_init_net_data, nominal_camera, DatasetReader, DemoConfig, ExpertConfig, GenerationSummary, InitDataConfig, TaskKind, TaskSpace, TaskSpec};
use serde::{Deserialize, Serialize};

use crate::metrics::{append_episodes, append_rows, summarize, MetricsRow, RowLabels};

pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Fine,
    EndToEnd,
    Init,
}

impl DataKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fine" => Some(DataKind::Fine),
            "end_to_end" | "e2e" => Some(DataKind::EndToEnd),
            "init" => Some(DataKind::Init),
            _ => None,
        }
    }
}

pub fn parse_task(name: &str, tolerance_mm: Option<f64>) -> Result<TaskSpec> {
    let kind = TaskKind::parse(name).ok_or_else(|| anyhow!("unknown task `{name}` (expected round, square or screw)"))?;
    let task = TaskSpec::new(kind, tolerance_mm.map(|t| t / 1000.0));
    task.validate().map_err(|e| anyhow!(e))?;
    Ok(task)
}

pub fn parse_modalities(list: &str) -> Result<Vec<Modality>> {
    list.split(',').map(|s| Modality::parse(s.trim()).ok_or_else(|| anyhow!("unknown modality `{s}`"))).collect()
}

/// Optional generation config file; missing sections use defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub demo: Option<DemoConfig>,
    #[serde(default)]
    pub init: Option<InitDataConfig>,
}

pub fn read_json_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    match v.get("schema_version").and_then(|s| s.as_u64()) {
        Some(s) if s == CONFIG_SCHEMA as u64 => {}
        Some(s) => bail!("config schema_version {s} is not supported (expected {CONFIG_SCHEMA})"),
        None => bail!("config is missing schema_version"),
    }
    serde_json::from_value(v).with_context(|| format!("invalid config {}", path.display()))
}

#[derive(Debug, Clone)]
pub struct GenDataArgs {
    pub task: TaskSpec,
    pub kind: DataKind,
    pub frames: usize,
    pub seed: u64,
    pub config: Option<GenDataConfig>,
    pub modalities: Option<Vec<Modality>>,
    pub out: PathBuf,
    pub threads: usize,
}

pub fn gen_data(a: &GenDataArgs) -> Result<GenerationSummary> {
    if a.frames == 0 {
        bail!("--frames must be positive");
    }
    let cfg = a.config.clone();
    let summary = match a.kind {
        DataKind::Init => {
            let c = cfg.and_then(|c| c.init).unwrap_or_default();
            generate_init_net_data(&a.task, a.frames, &c, a.seed, &a.out, a.threads)?
        }
        DataKind::Fine | DataKind::EndToEnd => {
            let default_mods = a.modalities.clone().unwrap_or_else(|| vec![Modality::Rgb]);
            let mut c = cfg.and_then(|c| c.demo).unwrap_or_else(|| match a.kind {
                DataKind::Fine => DemoConfig::fine(default_mods.clone()),
                _ => DemoConfig::end_to_end(default_mods.clone()),
            });
            if let Some(m) = &a.modalities {
                c.modalities = m.clone();
            }
            generate_demos(&a.task, a.frames, &c, a.seed, &a.out, a.threads)?
        }
    };
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub dataset: PathBuf,
    pub arch: ArchSpec,
    pub modality: Modality,
    pub epochs: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Use only this many leading frames.
    pub frames: Option<usize>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub role: String,
    pub frames: usize,
    pub first_loss: f64,
    pub final_loss: f64,
}

/// Trains on a fine, end-to-end or init dataset; the manifest decides which.
pub fn train(a: &TrainArgs) -> Result<TrainSummary> {
    let reader = DatasetReader::open(&a.dataset).with_context(|| format!("opening dataset {}", a.dataset.display()))?;
    let m = &reader.manifest;
    let frames = a.frames.unwrap_or(reader.len()).min(reader.len());
    let role = m.kind.clone();
    let mut rng = RngStream::new(a.seed, "train");
    let mut cfg = a.train;
    cfg.epochs = a.epochs;
    let (set, net_cfg, cap) = match role.as_str() {
        "init" => {
            if a.arch.depth_recon {
                bail!("the initialisation network has no depth decoder; use --arch keypoint or conv");
            }
            if a.modality != Modality::Rgb {
                bail!("init datasets hold rgb frames only");
            }
            (init_training_set(&reader, &nominal_camera(), frames)?, NetConfig::init_net(), None)
        }
        "fine" | "end_to_end" => {
            if reader.stream(a.modality.name()).is_none() {
                bail!("modality `{}` is not in dataset {}", a.modality.name(), a.dataset.display());
            }
            let cap: SpeedCap = serde_json::from_value(m.config["expert"]["cap"].clone()).context("dataset config lacks expert.cap")?;
            let set = demo_training_set(&reader, a.modality, &cap, frames, a.arch.depth_recon)?;
            let net_cfg = NetConfig {
                input: set.input_shape[1],
                ..NetConfig::default()
            };
            (set, net_cfg, Some(cap))
        }
        other => bail!("unknown dataset kind `{other}`"),
    };
    let mut net = PolicyNet::<f32>::build(a.arch, a.modality, net_cfg, &mut rng)?;
    fs::create_dir_all(&a.out)?;
    let mut csv = String::from("epoch,loss,actions,reconstruction\n");
    let stats = coarse2fine::policy::train(&mut net, &set, &cfg, &mut rng, |s| {
        eprintln!("epoch {:>3}  loss {:.6}  actions {:.6}  recon {:.6}", s.epoch, s.loss, s.actions, s.reconstruction);
    })?;
    for s in &stats {
        csv.push_str(&format!("{},{},{},{}\n", s.epoch, s.loss, s.actions, s.reconstruction));
    }
    fs::write(a.out.join("loss.csv"), csv)?;
    let meta = serde_json::json!({
        "role": role,
        "dataset_frames": frames,
        "dataset_hash": m.config_hash,
        "task": m.task,
        "seed": a.seed,
        "train": cfg,
    });
    match cap {
        Some(cap) => Policy::new(net, cap).save(&a.out, meta)?,
        None => net.save(&a.out, meta)?,
    }
    Ok(TrainSummary {
        role,
        frames,
        first_loss: stats.first().map(|s| s.loss).unwrap_or(f64::NAN),
        final_loss: stats.last().map(|s| s.loss).unwrap_or(f64::NAN),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseSourceKind {
    Learned,
    Centroid,
    GroundTruth,
}

impl PoseSourceKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "learned" => Some(Self::Learned),
            "centroid" => Some(Self::Centroid),
            "ground_truth" => Some(Self::GroundTruth),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub task: TaskSpec,
    pub controller: ControllerKind,
    pub checkpoint: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub pose_source: Option<PoseSourceKind>,
    pub poses: usize,
    pub seed: u64,
    pub distractors: usize,
    pub moving_light: bool,
    pub speed_scale: f64,
    /// Calibration bias (m, rad).
    pub bias: [f64; 2],
    pub randomize: bool,
    pub depth_artifacts: bool,
    pub out: PathBuf,
    pub experiment_id: Option<String>,
    pub threads: usize,
}

fn load_policy(path: &Path, role: &str) -> Result<(Policy, serde_json::Value)> {
    let (p, meta) = Policy::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let found = meta.get("role").and_then(|r| r.as_str()).unwrap_or("");
    if found != role {
        bail!("checkpoint {} is a `{found}` model, this controller needs `{role}`", path.display());
    }
    Ok((p, meta))
}

pub fn eval(a: &EvalArgs) -> Result<(MetricsRow, Vec<EpisodeOutcome>)> {
    if a.poses == 0 {
        bail!("--poses must be positive");
    }
    let mut labels = RowLabels {
        experiment_id: String::new(),
        modality: "depth".into(),
        arch: "none".into(),
        dataset_frames: 0,
    };
    let describe = |labels: &mut RowLabels, meta: &serde_json::Value| {
        labels.modality = meta["modality"].as_str().unwrap_or("").to_string();
        labels.arch = serde_json::from_value::<ArchSpec>(meta["arch"].clone()).map(|a| a.name()).unwrap_or_default();
        labels.dataset_frames = meta["dataset_frames"].as_u64().unwrap_or(0) as usize;
    };
    let mut ctl = Controllers {
        pose: PoseSource::GroundTruth,
        fine: None,
        end_to_end: None,
    };
    match a.controller {
        ControllerKind::EndToEnd => {
            let ck = a.checkpoint.as_ref().ok_or_else(|| anyhow!("--checkpoint is required for end_to_end"))?;
            let (p, meta) = load_policy(ck, "end_to_end")?;
            describe(&mut labels, &meta);
            ctl.end_to_end = Some(p);
        }
        ControllerKind::CoarseToFine | ControllerKind::IcpOnly => {
            if a.controller == ControllerKind::CoarseToFine {
                match &a.checkpoint {
                    Some(ck) => {
                        let (p, meta) = load_policy(ck, "fine")?;
                        describe(&mut labels, &meta);
                        ctl.fine = Some(FineController::Learned(p));
                    }
                    None if a.pose_source == Some(PoseSourceKind::GroundTruth) => {
                        labels.modality = "state".into();
                        labels.arch = "expert".into();
                        ctl.fine = Some(FineController::Expert(ExpertConfig::default()));
                    }
                    None => bail!("--checkpoint is required for coarse_to_fine"),
                }
            }
            let kind = a.pose_source.unwrap_or(if a.init_checkpoint.is_some() { PoseSourceKind::Learned } else { PoseSourceKind::Centroid });
            ctl.pose = match kind {
                PoseSourceKind::GroundTruth => PoseSource::GroundTruth,
                PoseSourceKind::Centroid => PoseSource::CloudCentroid,
                PoseSourceKind::Learned => {
                    let ck = a.init_checkpoint.as_ref().ok_or_else(|| anyhow!("--init-checkpoint is required for the learned pose source"))?;
                    let (net, meta) = PolicyNet::<f32>::load(ck).with_context(|| format!("loading {}", ck.display()))?;
                    if meta.get("role").and_then(|r| r.as_str()) != Some("init") {
                        bail!("{} is not an initialisation checkpoint", ck.display());
                    }
                    PoseSource::Learned(net)
                }
            };
        }
    }
    labels.experiment_id = a.experiment_id.clone().unwrap_or_else(|| format!("{}/{}", a.task.label(), a.controller.name()));
    let space = TaskSpace::default();
    let suite = EvalSuite::new(&a.task, a.poses, a.seed, &space, a.bias);
    let depth = if a.depth_artifacts { DepthArtifactConfig::default() } else { DepthArtifactConfig::bypass() };
    let sensors = Sensors::with_bias(&suite.bias, depth);
    let mut settings = EpisodeSettings {
        randomize_visuals: a.randomize,
        distractors: a.distractors,
        moving_light: a.moving_light,
        ..EpisodeSettings::default()
    };
    settings.controller.speed_scale = a.speed_scale;
    let outcomes = run_suite(&a.task, &suite, a.controller, &ctl, &sensors, &settings, &space, a.threads)?;
    let row = summarize(&labels, a.seed, &outcomes);
    fs::create_dir_all(&a.out)?;
    append_rows(&a.out.join("metrics.csv"), std::slice::from_ref(&row))?;
    append_episodes(&a.out.join("episodes.jsonl"), &outcomes)?;
    Ok((row, outcomes))
}

/// Worker cap: `COARSE2FINE_THREADS` if set, otherwise the machine's parallelism.
pub fn default_threads() -> usize {
    std::env::var("COARSE2FINE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Hex SHA-256 over every file in `dir`, visited in name order.
pub fn hash_dir(dir: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        if p.is_file() {
            h.update(p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
            h.update(fs::read(&p)?);
        }
    }
    Ok(hex::encode(h.finalize()))
}
