//! Experiment presets run as a resumable gen → train → eval grid.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use coarse2fine::control::ControllerKind;
use coarse2fine::policy::{ArchSpec, Modality, TrainConfig};
use coarse2fine::tasks::{TaskKind, TaskSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands::{eval, gen_data, train, DataKind, EvalArgs, GenDataArgs, PoseSourceKind, TrainArgs};
use crate::metrics::{sort_rows, write_rows, MetricsRow};
use crate::plot;

pub const STATE_FILE: &str = "sweep_state.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Fig3,
    Modality,
    Architecture,
    Robustness,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fig3" => Some(Preset::Fig3),
            "modality" => Some(Preset::Modality),
            "architecture" => Some(Preset::Architecture),
            "robustness" => Some(Preset::Robustness),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Fig3 => "fig3",
            Preset::Modality => "modality",
            Preset::Architecture => "architecture",
            Preset::Robustness => "robustness",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepOptions {
    pub preset: Preset,
    pub out: PathBuf,
    pub paper_scale: bool,
    /// Overrides the preset's dataset sizes.
    pub frames: Option<Vec<usize>>,
    /// Overrides the preset's tasks.
    pub tasks: Option<Vec<TaskSpec>>,
    pub poses: usize,
    /// The first seed drives data and training; every seed gets its own evaluation row.
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub init_samples: usize,
    pub pose_source: PoseSourceKind,
    pub bias: [f64; 2],
    pub train: TrainConfig,
    #[serde(skip)]
    pub threads: usize,
    /// Stop after this many steps, leaving the state file for a later resume.
    #[serde(skip)]
    pub max_steps: Option<usize>,
}

impl SweepOptions {
    pub fn new(preset: Preset, out: PathBuf) -> Self {
        Self {
            preset,
            out,
            paper_scale: false,
            frames: None,
            tasks: None,
            poses: 20,
            seeds: vec![0],
            epochs: 10,
            init_samples: 2000,
            pose_source: PoseSourceKind::Learned,
            bias: [0.003, 1f64.to_radians()],
            train: TrainConfig::default(),
            threads: 1,
            max_steps: None,
        }
    }

    fn sizes(&self) -> Vec<usize> {
        if let Some(f) = &self.frames {
            return f.clone();
        }
        match (self.preset, self.paper_scale) {
            (Preset::Fig3, false) => vec![2_000, 5_000, 10_000],
            (Preset::Fig3, true) => vec![10_000, 50_000, 100_000, 150_000],
            (_, false) => vec![10_000],
            (_, true) => vec![100_000],
        }
    }

    fn task_list(&self) -> Vec<TaskSpec> {
        if let Some(t) = &self.tasks {
            return t.clone();
        }
        match self.preset {
            Preset::Fig3 => [TaskKind::Round, TaskKind::Square, TaskKind::Screw].into_iter().map(|k| TaskSpec::new(k, None)).collect(),
            Preset::Modality | Preset::Architecture => [0.5, 1.25, 2.5].into_iter().map(|t| TaskSpec::new(TaskKind::Square, Some(t / 1000.0))).collect(),
            Preset::Robustness => vec![TaskSpec::new(TaskKind::Round, None)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Gen { task: TaskSpec, kind: DataKind, frames: usize, modalities: Vec<Modality>, dir: PathBuf },
    Train { dataset: PathBuf, arch: ArchSpec, modality: Modality, frames: usize, out: PathBuf },
    Eval(EvalStep),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStep {
    pub experiment_id: String,
    pub task: TaskSpec,
    pub controller: ControllerKind,
    pub checkpoint: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub seed: u64,
    pub distractors: usize,
    pub moving_light: bool,
    pub speed_scale: f64,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub id: String,
    pub action: Action,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SweepState {
    pub plan_hash: String,
    pub completed: BTreeSet<String>,
    pub rows: Vec<MetricsRow>,
}

impl SweepState {
    pub fn load(path: &Path) -> Result<Option<Self>> {
        match fs::read_to_string(path) {
            Ok(s) => Ok(Some(serde_json::from_str(&s).with_context(|| format!("corrupt state file {}", path.display()))?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Write-then-rename so an interruption never leaves a torn file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub finished: bool,
    pub ran: usize,
    pub remaining: usize,
    pub rows: Vec<MetricsRow>,
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '-' }).collect()
}

/// Every step of a preset, in execution order; ids are unique.
pub fn plan(o: &SweepOptions) -> Vec<Step> {
    let mut gens = Vec::new();
    let mut trains = Vec::new();
    let mut evals = Vec::new();
    let data = o.out.join("data");
    let ckpt = o.out.join("ckpt");
    let runs = o.out.join("runs");
    let sizes = o.sizes();
    let largest = sizes.iter().copied().max().unwrap_or(0);
    let p = o.preset.name();
    let learned_init = o.pose_source == PoseSourceKind::Learned;

    let mut eval_step = |id: String, task: &TaskSpec, controller, checkpoint: Option<PathBuf>, init: Option<PathBuf>, extra: (usize, bool, f64)| {
        for &seed in &o.seeds {
            let exp = id.clone();
            evals.push(Step {
                id: format!("eval/{exp}/seed{seed}"),
                action: Action::Eval(EvalStep {
                    experiment_id: exp.clone(),
                    task: *task,
                    controller,
                    checkpoint: checkpoint.clone(),
                    init_checkpoint: init.clone(),
                    seed,
                    distractors: extra.0,
                    moving_light: extra.1,
                    speed_scale: extra.2,
                    dir: runs.join(slug(&exp)).join(format!("seed{seed}")),
                }),
            });
        }
    };
    let nominal = (0, false, 1.0);

    for task in o.task_list() {
        let t = task.label();
        let init = if learned_init {
            let dir = data.join(format!("{t}_init"));
            gens.push(Step {
                id: format!("gen/{t}/init"),
                action: Action::Gen { task, kind: DataKind::Init, frames: o.init_samples, modalities: vec![Modality::Rgb], dir: dir.clone() },
            });
            let out = ckpt.join(format!("{t}_init"));
            trains.push(Step {
                id: format!("train/{t}/init"),
                action: Action::Train { dataset: dir, arch: ArchSpec::parse("keypoint").unwrap(), modality: Modality::Rgb, frames: o.init_samples, out: out.clone() },
            });
            Some(out)
        } else {
            None
        };
        let mods: Vec<Modality> = match o.preset {
            Preset::Modality => Modality::ALL.to_vec(),
            _ => vec![Modality::Rgb],
        };
        let fine_dir = data.join(format!("{t}_fine"));
        gens.push(Step {
            id: format!("gen/{t}/fine"),
            action: Action::Gen { task, kind: DataKind::Fine, frames: largest, modalities: mods.clone(), dir: fine_dir.clone() },
        });
        let fine = |trains: &mut Vec<Step>, arch: ArchSpec, modality: Modality, frames: usize| {
            let name = format!("{t}_fine_{}_{}_{frames}", arch.name(), modality.name());
            let out = ckpt.join(&name);
            trains.push(Step {
                id: format!("train/{name}"),
                action: Action::Train { dataset: fine_dir.clone(), arch, modality, frames, out: out.clone() },
            });
            out
        };
        match o.preset {
            Preset::Fig3 => {
                let e2e_dir = data.join(format!("{t}_e2e"));
                gens.push(Step {
                    id: format!("gen/{t}/end_to_end"),
                    action: Action::Gen { task, kind: DataKind::EndToEnd, frames: largest, modalities: vec![Modality::Rgb], dir: e2e_dir.clone() },
                });
                for &n in &sizes {
                    let c = fine(&mut trains, ArchSpec::KEYPOINT_RECON, Modality::Rgb, n);
                    eval_step(format!("{p}/{t}/coarse_to_fine/{n:06}"), &task, ControllerKind::CoarseToFine, Some(c), init.clone(), nominal);
                    let name = format!("{t}_e2e_keypoint_rgb_{n}");
                    let out = ckpt.join(&name);
                    trains.push(Step {
                        id: format!("train/{name}"),
                        action: Action::Train { dataset: e2e_dir.clone(), arch: ArchSpec::parse("keypoint").unwrap(), modality: Modality::Rgb, frames: n, out: out.clone() },
                    });
                    eval_step(format!("{p}/{t}/end_to_end/{n:06}"), &task, ControllerKind::EndToEnd, Some(out), None, nominal);
                }
                eval_step(format!("{p}/{t}/icp_only/000000"), &task, ControllerKind::IcpOnly, None, init.clone(), nominal);
            }
            Preset::Modality => {
                for m in Modality::ALL {
                    let c = fine(&mut trains, ArchSpec::KEYPOINT_RECON, m, largest);
                    eval_step(format!("{p}/{t}/{}", m.name()), &task, ControllerKind::CoarseToFine, Some(c), init.clone(), nominal);
                }
            }
            Preset::Architecture => {
                for a in ArchSpec::ALL {
                    let c = fine(&mut trains, a, Modality::Rgb, largest);
                    eval_step(format!("{p}/{t}/{}", a.name()), &task, ControllerKind::CoarseToFine, Some(c), init.clone(), nominal);
                }
            }
            Preset::Robustness => {
                let c = fine(&mut trains, ArchSpec::KEYPOINT_RECON, Modality::Rgb, largest);
                let conditions: [(&str, (usize, bool, f64)); 5] =
                    [("baseline", nominal), ("distractors", (5, false, 1.0)), ("moving_light", (0, true, 1.0)), ("speed_0.5", (0, false, 0.5)), ("speed_2", (0, false, 2.0))];
                for (name, extra) in conditions {
                    eval_step(format!("{p}/{t}/{name}"), &task, ControllerKind::CoarseToFine, Some(c.clone()), init.clone(), extra);
                }
            }
        }
    }
    gens.into_iter().chain(trains).chain(evals).collect()
}

fn plan_hash(o: &SweepOptions, steps: &[Step]) -> Result<String> {
    let v = serde_json::json!({ "options": o, "steps": steps });
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&v)?)))
}

fn run_step(o: &SweepOptions, step: &Step) -> Result<Option<MetricsRow>> {
    let seed = o.seeds.first().copied().unwrap_or(0);
    match &step.action {
        Action::Gen { task, kind, frames, modalities, dir } => {
            let _ = fs::remove_dir_all(dir);
            gen_data(&GenDataArgs {
                task: *task,
                kind: *kind,
                frames: *frames,
                seed,
                config: None,
                modalities: Some(modalities.clone()),
                out: dir.clone(),
                threads: o.threads,
            })?;
            Ok(None)
        }
        Action::Train { dataset, arch, modality, frames, out } => {
            train(&TrainArgs {
                dataset: dataset.clone(),
                arch: *arch,
                modality: *modality,
                epochs: o.epochs,
                seed,
                out: out.clone(),
                frames: Some(*frames),
                train: o.train,
            })?;
            Ok(None)
        }
        Action::Eval(e) => {
            let _ = fs::remove_dir_all(&e.dir);
            let pose_source = match e.controller {
                ControllerKind::EndToEnd => None,
                _ => Some(o.pose_source),
            };
            let (row, _) = eval(&EvalArgs {
                task: e.task,
                controller: e.controller,
                checkpoint: e.checkpoint.clone(),
                init_checkpoint: e.init_checkpoint.clone(),
                pose_source,
                poses: o.poses,
                seed: e.seed,
                distractors: e.distractors,
                moving_light: e.moving_light,
                speed_scale: e.speed_scale,
                bias: o.bias,
                randomize: true,
                depth_artifacts: true,
                out: e.dir.clone(),
                experiment_id: Some(e.experiment_id.clone()),
                threads: o.threads,
            })?;
            Ok(Some(row))
        }
    }
}

/// Runs (or resumes) a preset. On failure the state and a partial metrics.csv are kept.
pub fn run_sweep(o: &SweepOptions) -> Result<SweepReport> {
    fs::create_dir_all(&o.out)?;
    let steps = plan(o);
    let hash = plan_hash(o, &steps)?;
    let state_path = o.out.join(STATE_FILE);
    let state = match SweepState::load(&state_path)? {
        Some(s) if s.plan_hash == hash => s,
        Some(_) => bail!("{} belongs to a different sweep configuration; remove it or use another --out", state_path.display()),
        None => SweepState {
            plan_hash: hash,
            ..SweepState::default()
        },
    };
    state.save(&state_path)?;
    let budget = o.max_steps.unwrap_or(usize::MAX);
    let state = Mutex::new(state);
    let ran = Mutex::new(0usize);
    let pending = |kind: fn(&Action) -> bool| -> Vec<&Step> {
        let s = state.lock().unwrap();
        steps.iter().filter(|st| kind(&st.action) && !s.completed.contains(&st.id)).collect()
    };
    let record = |step: &Step, row: Option<MetricsRow>| -> Result<()> {
        let mut s = state.lock().unwrap();
        s.completed.insert(step.id.clone());
        if let Some(r) = row {
            s.rows.push(r);
        }
        s.save(&state_path)
    };
    let claim = || {
        let mut r = ran.lock().unwrap();
        if *r >= budget {
            false
        } else {
            *r += 1;
            true
        }
    };

    let result = (|| -> Result<()> {
        for step in pending(|a| matches!(a, Action::Gen { .. })) {
            if !claim() {
                return Ok(());
            }
            eprintln!("[sweep] {}", step.id);
            run_step(o, step).with_context(|| format!("step {}", step.id))?;
            record(step, None)?;
        }
        // trainings are single-threaded, so they share a pool
        let queue = Mutex::new(pending(|a| matches!(a, Action::Train { .. })).into_iter());
        let workers = o.threads.max(1);
        let errors: Mutex<Vec<anyhow::Error>> = Mutex::new(Vec::new());
        std::thread::scope(|sc| {
            for _ in 0..workers {
                sc.spawn(|| loop {
                    if !errors.lock().unwrap().is_empty() {
                        return;
                    }
                    let Some(step) = queue.lock().unwrap().next() else { return };
                    if !claim() {
                        return;
                    }
                    eprintln!("[sweep] {}", step.id);
                    let r = run_step(o, step).with_context(|| format!("step {}", step.id)).and_then(|_| record(step, None));
                    if let Err(e) = r {
                        errors.lock().unwrap().push(e);
                    }
                });
            }
        });
        if let Some(e) = errors.into_inner().unwrap().into_iter().next() {
            return Err(e);
        }
        if *ran.lock().unwrap() >= budget && !pending(|a| matches!(a, Action::Train { .. })).is_empty() {
            return Ok(());
        }
        for step in pending(|a| matches!(a, Action::Eval(_))) {
            if !claim() {
                return Ok(());
            }
            eprintln!("[sweep] {}", step.id);
            let row = run_step(o, step).with_context(|| format!("step {}", step.id))?;
            record(step, row)?;
        }
        Ok(())
    })();

    let state = state.into_inner().unwrap();
    let mut rows = state.rows.clone();
    sort_rows(&mut rows);
    write_rows(&o.out.join("metrics.csv"), &rows)?;
    result?;
    let remaining = steps.iter().filter(|s| !state.completed.contains(&s.id)).count();
    if remaining == 0 {
        write_plots(o.preset, &o.out, &rows)?;
    }
    Ok(SweepReport {
        finished: remaining == 0,
        ran: ran.into_inner().unwrap(),
        remaining,
        rows,
    })
}

fn mean_by<K: Ord>(rows: &[MetricsRow], key: impl Fn(&MetricsRow) -> K) -> BTreeMap<K, f64> {
    let mut acc: BTreeMap<K, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(key(r)).or_default();
        e.0 += r.success_rate;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn segment(id: &str, i: usize) -> String {
    id.split('/').nth(i).unwrap_or("").to_string()
}

/// One success-rate chart per task (or one per preset when it is single-task).
pub fn write_plots(preset: Preset, out: &Path, rows: &[MetricsRow]) -> Result<()> {
    let dir = out.join("plots");
    fs::create_dir_all(&dir)?;
    match preset {
        Preset::Fig3 => {
            let tasks: BTreeSet<String> = rows.iter().map(|r| r.task.clone()).collect();
            for task in tasks {
                let rs: Vec<MetricsRow> = rows.iter().filter(|r| r.task == task).cloned().collect();
                let means = mean_by(&rs, |r| (r.controller.clone(), r.dataset_frames));
                let sizes: BTreeSet<usize> = rs.iter().filter(|r| r.dataset_frames > 0).map(|r| r.dataset_frames).collect();
                let ticks: Vec<String> = sizes.iter().map(|n| n.to_string()).collect();
                let mut series = Vec::new();
                for c in ["coarse_to_fine", "end_to_end"] {
                    series.push((c.to_string(), sizes.iter().map(|&n| means.get(&(c.to_string(), n)).copied()).collect()));
                }
                if let Some(v) = means.get(&("icp_only".to_string(), 0)) {
                    series.push(("icp_only".to_string(), vec![Some(*v); sizes.len()]));
                }
                plot::line_chart(&dir.join(format!("{task}.png")), &task, "DATASET FRAMES", &ticks, &series)?;
            }
        }
        Preset::Modality | Preset::Architecture => {
            let means = mean_by(rows, |r| (r.task.clone(), segment(&r.experiment_id, 2)));
            let groups: Vec<String> = rows.iter().map(|r| r.task.clone()).collect::<BTreeSet<_>>().into_iter().collect();
            let series: Vec<String> = rows.iter().map(|r| segment(&r.experiment_id, 2)).collect::<BTreeSet<_>>().into_iter().collect();
            let values: Vec<Vec<Option<f64>>> = groups.iter().map(|g| series.iter().map(|s| means.get(&(g.clone(), s.clone())).copied()).collect()).collect();
            plot::bar_chart(&dir.join(format!("{}.png", preset.name())), preset.name(), "TASK", &groups, &series, &values)?;
        }
        Preset::Robustness => {
            let tasks: BTreeSet<String> = rows.iter().map(|r| r.task.clone()).collect();
            for task in tasks {
                let rs: Vec<MetricsRow> = rows.iter().filter(|r| r.task == task).cloned().collect();
                let means = mean_by(&rs, |r| segment(&r.experiment_id, 2));
                let groups: Vec<String> = means.keys().cloned().collect();
                let values: Vec<Vec<Option<f64>>> = means.values().map(|v| vec![Some(*v)]).collect();
                plot::bar_chart(&dir.join(format!("{task}.png")), &task, "CONDITION", &groups, &["COARSE_TO_FINE".to_string()], &values)?;
            }
        }
    }
    Ok(())
}

/// `round`, `square:0.5` (tolerance in mm), comma separated.
pub fn parse_task_list(s: &str) -> Result<Vec<TaskSpec>> {
    s.split(',')
        .map(|item| {
            let mut it = item.trim().splitn(2, ':');
            let name = it.next().unwrap_or("");
            let tol = it.next().map(|t| t.parse::<f64>().map_err(|_| anyhow!("bad tolerance in `{item}`"))).transpose()?;
            crate::commands::parse_task(name, tol)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_shapes() {
        let out = PathBuf::from("/tmp/x");
        let count = |o: &SweepOptions| plan(o).iter().filter(|s| matches!(s.action, Action::Eval(_))).count();
        let mut o = SweepOptions::new(Preset::Fig3, out.clone());
        o.paper_scale = true;
        assert_eq!(count(&o), 3 * (4 * 2 + 1));
        o.paper_scale = false;
        assert_eq!(count(&o), 3 * (3 * 2 + 1));
        assert_eq!(count(&SweepOptions::new(Preset::Modality, out.clone())), 12);
        assert_eq!(count(&SweepOptions::new(Preset::Architecture, out.clone())), 12);
        assert_eq!(count(&SweepOptions::new(Preset::Robustness, out)), 5);
    }

    #[test]
    fn step_ids_are_unique() {
        for p in [Preset::Fig3, Preset::Modality, Preset::Architecture, Preset::Robustness] {
            let mut o = SweepOptions::new(p, PathBuf::from("/tmp/x"));
            o.seeds = vec![1, 2];
            let steps = plan(&o);
            let ids: BTreeSet<&String> = steps.iter().map(|s| &s.id).collect();
            assert_eq!(ids.len(), steps.len(), "{}", p.name());
        }
    }

    #[test]
    fn task_list_parsing() {
        let t = parse_task_list("round, square:0.5").unwrap();
        assert_eq!(t[0].label(), "round_5mm");
        assert_eq!(t[1].label(), "square_0.5mm");
        assert!(parse_task_list("hex").is_err());
    }
}
