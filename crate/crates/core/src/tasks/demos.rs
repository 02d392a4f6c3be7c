//! Demonstration and initialisation-network dataset generation.
//!
//! Every episode (or init sample) draws from its own stream derived from the
//! dataset seed and its index, so a smaller dataset is an exact prefix of a
//! larger one generated with the same seed and configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{DatasetError, DatasetReader, DatasetWriter, StreamInfo};
use super::expert::{expert_action, ExpertConfig, ExpertState};
use super::sensing::{crop_center, fine_observation, full_frame_observation, FineView, Observation};
use super::{bottleneck_offset, build_scene, nominal_camera, RingState, SamplingSpec, TaskError, TaskSpace, TaskSpec};
use crate::control::contact_model;
use crate::domain_rand::{perturb_action, perturb_geometry, randomize_visuals, RandConfig, RngStream};
use crate::geometry::{CameraModel, Pose, SpeedCap, Twist};
use crate::icp::InitPrediction;
use crate::imaging::Image;
use crate::policy::{action_scale, encode_init_target, Modality, TrainingSet};
use crate::renderer::Scene;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoKind {
    /// Starts near the bottleneck, wrist crops as input.
    Fine,
    /// Starts at the neutral pose, padded full frames as input.
    EndToEnd,
}

impl DemoKind {
    pub fn name(self) -> &'static str {
        match self {
            DemoKind::Fine => "fine",
            DemoKind::EndToEnd => "end_to_end",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub kind: DemoKind,
    pub modalities: Vec<Modality>,
    /// Also store the perfect depth of the input view as a reconstruction target.
    pub depth_target: bool,
    pub randomize: bool,
    pub rand: RandConfig,
    pub expert: ExpertConfig,
    pub sampling: SamplingSpec,
    pub task_space: TaskSpace,
    pub view: FineView,
    pub full_frame: usize,
    pub dt: f64,
    pub max_steps: usize,
    /// Start jitter around the neutral pose for end-to-end episodes (m, rad).
    pub start_jitter: [f64; 2],
}

impl DemoConfig {
    pub fn fine(modalities: Vec<Modality>) -> Self {
        Self {
            kind: DemoKind::Fine,
            modalities,
            depth_target: true,
            randomize: true,
            rand: RandConfig::default(),
            expert: ExpertConfig::default(),
            sampling: SamplingSpec::default(),
            task_space: TaskSpace::default(),
            view: FineView::default(),
            full_frame: 128,
            dt: 0.05,
            max_steps: 200,
            start_jitter: [0.01, 0.05],
        }
    }

    pub fn end_to_end(modalities: Vec<Modality>) -> Self {
        Self {
            kind: DemoKind::EndToEnd,
            depth_target: false,
            expert: ExpertConfig::end_to_end(),
            max_steps: 300,
            ..Self::fine(modalities)
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        self.rand.validate()?;
        let bad = |m: &str| Err(TaskError::Config(m.to_string()));
        if self.modalities.is_empty() {
            return bad("at least one modality is required");
        }
        if !(self.dt > 0.0) || self.max_steps == 0 {
            return bad("dt and max_steps must be positive");
        }
        if self.view.crop == 0 || self.view.out == 0 || self.full_frame == 0 {
            return bad("image sizes must be positive");
        }
        if self.kind == DemoKind::EndToEnd && self.depth_target {
            return bad("depth targets are only recorded for fine demonstrations");
        }
        Ok(())
    }

    fn input_size(&self) -> usize {
        match self.kind {
            DemoKind::Fine => self.view.out,
            DemoKind::EndToEnd => self.full_frame,
        }
    }

    pub fn streams(&self) -> Vec<StreamInfo> {
        let n = self.input_size();
        let mut s: Vec<StreamInfo> = self.modalities.iter().map(|m| StreamInfo::new(m.name(), n, n, m.channels())).collect();
        s.push(StreamInfo::new("action", 1, 1, 4));
        if self.depth_target {
            s.push(StreamInfo::new("depth_target", n, n, 1));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub index: u64,
    pub object: Pose,
    pub initial_ee: Pose,
    /// `frames[t]` follows the order of [`DemoConfig::streams`].
    pub frames: Vec<Vec<Image>>,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub frames: usize,
    pub episodes: usize,
    pub successes: usize,
    pub config_hash: String,
}

/// Starting end-effector pose of episode `index`, plus the object pose.
pub fn episode_start(task: &TaskSpec, cfg: &DemoConfig, rng: &mut RngStream) -> (Pose, Pose) {
    let cam = nominal_camera();
    let object = cfg.task_space.sample_object(task, &cam, rng);
    let ee = match cfg.kind {
        DemoKind::Fine => object.compose(&bottleneck_offset()).compose(&cfg.sampling.demo_offset(rng)),
        DemoKind::EndToEnd => {
            let [t, a] = cfg.start_jitter;
            let mut u = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
            cfg.task_space.neutral.compose(&Pose::from_xyz_yaw(u(t), u(t), u(t), u(a)))
        }
    };
    (object, ee)
}

/// Sensor view of one timestep, with visual and geometric randomisation applied
/// when enabled. `cam` is the nominal camera.
pub fn observe(task: &TaskSpec, object: &Pose, ee: &Pose, cfg: &DemoConfig, cam: &CameraModel, rng: &mut RngStream) -> Result<Observation, TaskError> {
    let base = build_scene(task, object, ee);
    let (scene, render_cam, crop_offset): (Scene, CameraModel, (i64, i64)) = if cfg.randomize {
        let s = randomize_visuals(&base, &cfg.rand, rng);
        let j = perturb_geometry(&s, cam, &cfg.rand, rng);
        (j.scene, j.camera, j.crop_offset)
    } else {
        (base, *cam, (0, 0))
    };
    match cfg.kind {
        DemoKind::Fine => {
            let (u, v) = crop_center(cam, &cfg.view)?;
            let center = (u + crop_offset.0 as f64, v + crop_offset.1 as f64);
            fine_observation(&scene, &render_cam, center, &cfg.view, &cfg.modalities, cfg.depth_target, &cfg.rand.depth, rng)
        }
        DemoKind::EndToEnd => full_frame_observation(&scene, &render_cam, cfg.full_frame, &cfg.modalities, &cfg.rand.depth, rng),
    }
}

fn twist_image(a: &Twist) -> Image {
    Image::from_vec(1, 1, 4, a.to_array().iter().map(|&v| v as f32).collect()).expect("4 values")
}

/// Rolls out the expert from the episode's start state and records every frame
/// until success or `max_steps`.
pub fn record_episode(task: &TaskSpec, cfg: &DemoConfig, seed: u64, index: u64) -> Result<EpisodeRecord, TaskError> {
    let mut rng = RngStream::derive(seed, "episode", index);
    let cam = nominal_camera();
    let (object, initial_ee) = episode_start(task, cfg, &mut rng);
    let mut expert = ExpertState::new(&object, &initial_ee, &cfg.expert, &mut rng);
    let mut ee = initial_ee;
    let mut frames = Vec::new();
    for _ in 0..cfg.max_steps {
        if task.success(&RingState::of(&object, &ee)) {
            break;
        }
        let obs = observe(task, &object, &ee, cfg, &cam, &mut rng)?;
        // labels always come from the clean state
        let label = expert_action(task, &object, &ee, &cfg.expert, &mut expert);
        let mut f: Vec<Image> = obs.images.into_iter().map(|(_, i)| i).collect();
        f.push(twist_image(&label));
        if let Some(d) = obs.depth_target {
            f.push(d);
        }
        frames.push(f);
        let executed = if cfg.randomize {
            perturb_action(&label, &cfg.rand, &cfg.expert.cap, &mut rng)
        } else {
            label
        };
        ee = contact_model(task, &object, &ee, &executed.integrate(&ee, cfg.dt));
    }
    Ok(EpisodeRecord {
        index,
        object,
        initial_ee,
        frames,
        success: task.success(&RingState::of(&object, &ee)),
    })
}

/// Runs `f(i)` for `i` in `start..start + n` on up to `threads` worker threads,
/// returning results in index order.
fn parallel_map<T: Send>(start: u64, n: usize, threads: usize, f: impl Fn(u64) -> T + Sync) -> Vec<T> {
    let threads = threads.max(1).min(n.max(1));
    if threads == 1 {
        return (0..n as u64).map(|i| f(start + i)).collect();
    }
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|sc| {
        for (t, chunk) in out.chunks_mut(n.div_ceil(threads)).enumerate() {
            let f = &f;
            let base = t * n.div_ceil(threads);
            sc.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(f(start + (base + k) as u64));
                }
            });
        }
    });
    out.into_iter().map(|o| o.expect("every slot filled")).collect()
}

/// Writes exactly `frames` frames of expert demonstrations to `dir`.
pub fn generate_demos(task: &TaskSpec, frames: usize, cfg: &DemoConfig, seed: u64, dir: &Path, threads: usize) -> Result<GenerationSummary, TaskError> {
    cfg.validate()?;
    task.validate().map_err(TaskError::Config)?;
    let config = serde_json::to_value(cfg).expect("config serialises");
    let task_json = serde_json::to_value(task).expect("task serialises");
    let mut w = DatasetWriter::create(dir, cfg.kind.name(), task_json, seed, cfg.streams(), config)?;
    let (mut written, mut episodes, mut successes, mut next) = (0usize, 0usize, 0usize, 0u64);
    while written < frames {
        let batch = threads.max(1);
        let records = parallel_map(next, batch, threads, |i| record_episode(task, cfg, seed, i));
        next += batch as u64;
        for r in records {
            let mut r = r?;
            if written >= frames || r.frames.is_empty() {
                continue;
            }
            r.frames.truncate(frames - written);
            written += r.frames.len();
            episodes += 1;
            successes += r.success as usize;
            w.write_episode(&r.frames, r.index, r.object, r.initial_ee, r.success)?;
        }
    }
    let manifest = w.finish()?;
    Ok(GenerationSummary {
        frames: written,
        episodes,
        successes,
        config_hash: manifest.config_hash,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitDataConfig {
    pub task_space: TaskSpace,
    pub full_frame: usize,
    pub randomize: bool,
    pub rand: RandConfig,
    /// Samples per episode file.
    pub chunk: usize,
}

impl Default for InitDataConfig {
    fn default() -> Self {
        Self {
            task_space: TaskSpace::default(),
            full_frame: 128,
            randomize: true,
            rand: RandConfig::default(),
            chunk: 256,
        }
    }
}

/// One init-network sample: the padded full frame from the neutral pose and the
/// object anchor `(u, v, depth, yaw)` as seen by the camera that rendered it.
pub fn init_sample(task: &TaskSpec, cfg: &InitDataConfig, seed: u64, index: u64) -> Result<(Pose, Image, [f64; 4]), TaskError> {
    let mut rng = RngStream::derive(seed, "init", index);
    let cam = nominal_camera();
    let object = cfg.task_space.sample_object(task, &cam, &mut rng);
    let ee = cfg.task_space.neutral;
    let base = build_scene(task, &object, &ee);
    let (scene, render_cam) = if cfg.randomize {
        let s = randomize_visuals(&base, &cfg.rand, &mut rng);
        let j = perturb_geometry(&s, &cam, &cfg.rand, &mut rng);
        (j.scene, j.camera)
    } else {
        (base, cam)
    };
    let obs = full_frame_observation(&scene, &render_cam, cfg.full_frame, &[Modality::Rgb], &cfg.rand.depth, &mut rng)?;
    let (u, v, d) = render_cam.project_world(&ee, &object.translation)?;
    let img = obs.images.into_iter().next().expect("rgb requested").1;
    Ok((object, img, [u, v, d, object.yaw()]))
}

/// Writes `samples` init-network samples in chunks of `cfg.chunk`.
pub fn generate_init_net_data(task: &TaskSpec, samples: usize, cfg: &InitDataConfig, seed: u64, dir: &Path, threads: usize) -> Result<GenerationSummary, TaskError> {
    cfg.rand.validate()?;
    if cfg.chunk == 0 || cfg.full_frame == 0 {
        return Err(TaskError::Config("chunk and full_frame must be positive".into()));
    }
    let n = cfg.full_frame;
    let streams = vec![StreamInfo::new("rgb", n, n, 3), StreamInfo::new("anchor", 1, 1, 4)];
    let config = serde_json::to_value(cfg).expect("config serialises");
    let task_json = serde_json::to_value(task).expect("task serialises");
    let mut w = DatasetWriter::create(dir, "init", task_json, seed, streams, config)?;
    let mut done = 0usize;
    let mut chunks = 0usize;
    while done < samples {
        let m = cfg.chunk.min(samples - done);
        let results = parallel_map(done as u64, m, threads, |i| init_sample(task, cfg, seed, i));
        let mut frames = Vec::with_capacity(m);
        for r in results {
            let (_, img, a) = r?;
            frames.push(vec![img, Image::from_vec(1, 1, 4, a.iter().map(|&v| v as f32).collect()).expect("4 values")]);
        }
        w.write_episode(&frames, chunks as u64, Pose::identity(), cfg.task_space.neutral, true)?;
        done += m;
        chunks += 1;
    }
    let manifest = w.finish()?;
    Ok(GenerationSummary {
        frames: done,
        episodes: chunks,
        successes: chunks,
        config_hash: manifest.config_hash,
    })
}

fn hwc_to_chw(src: &[f32], h: usize, w: usize, c: usize, out: &mut Vec<f32>) {
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.push(src[(y * w + x) * c + ch]);
            }
        }
    }
}

/// Fine or end-to-end behavioural-cloning set from the first `max_frames`
/// frames: inputs in CHW, actions divided by `cap`, optional depth targets.
pub fn demo_training_set(reader: &DatasetReader, modality: Modality, cap: &SpeedCap, max_frames: usize, with_depth: bool) -> Result<TrainingSet, TaskError> {
    let m = &reader.manifest;
    let stream = |name: &str| m.streams.iter().position(|s| s.name == name).ok_or_else(|| DatasetError::MissingStream(name.to_string()));
    let ki = stream(modality.name())?;
    let ka = stream("action")?;
    let kd = if with_depth { Some(stream("depth_target")?) } else { None };
    let si = &m.streams[ki];
    let n = max_frames.min(reader.len());
    let scale = action_scale(cap);
    let mut set = TrainingSet {
        input_shape: [si.channels, si.height, si.width],
        inputs: Vec::with_capacity(n * si.frame_len()),
        target_dim: 4,
        targets: Vec::with_capacity(n * 4),
        depth: kd.map(|_| Vec::with_capacity(n * si.height * si.width)),
    };
    let mut left = n;
    for e in 0..m.episodes.len() {
        if left == 0 {
            break;
        }
        let take = m.episodes[e].frames.min(left);
        let imgs = reader.read_episode(e)?;
        let fl = si.frame_len();
        for t in 0..take {
            hwc_to_chw(&imgs[ki].data[t * fl..(t + 1) * fl], si.height, si.width, si.channels, &mut set.inputs);
            for k in 0..4 {
                set.targets.push((imgs[ka].data[t * 4 + k] as f64 / scale[k]) as f32);
            }
            if let (Some(kd), Some(d)) = (kd, set.depth.as_mut()) {
                let dl = si.height * si.width;
                d.extend_from_slice(&imgs[kd].data[t * dl..(t + 1) * dl]);
            }
        }
        left -= take;
    }
    Ok(set)
}

/// Init-network set: padded RGB frames with encoded anchor targets.
pub fn init_training_set(reader: &DatasetReader, cam: &CameraModel, max_samples: usize) -> Result<TrainingSet, TaskError> {
    let m = &reader.manifest;
    let si = reader.stream("rgb").ok_or_else(|| DatasetError::MissingStream("rgb".into()))?.clone();
    if reader.stream("anchor").is_none() {
        return Err(DatasetError::MissingStream("anchor".into()).into());
    }
    let n = max_samples.min(reader.len());
    let mut set = TrainingSet {
        input_shape: [si.channels, si.height, si.width],
        inputs: Vec::with_capacity(n * si.frame_len()),
        target_dim: 5,
        targets: Vec::with_capacity(n * 5),
        depth: None,
    };
    let mut left = n;
    for e in 0..m.episodes.len() {
        if left == 0 {
            break;
        }
        let take = m.episodes[e].frames.min(left);
        let imgs = reader.read_episode(e)?;
        let fl = si.frame_len();
        for t in 0..take {
            hwc_to_chw(&imgs[0].data[t * fl..(t + 1) * fl], si.height, si.width, si.channels, &mut set.inputs);
            let a = &imgs[1].data[t * 4..(t + 1) * 4];
            let p = InitPrediction {
                u: a[0] as f64,
                v: a[1] as f64,
                depth: a[2] as f64,
                theta: a[3] as f64,
            };
            set.targets.extend_from_slice(&encode_init_target(&p, cam));
        }
        left -= take;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::DatasetReader;

    fn small_cfg() -> DemoConfig {
        let mut c = DemoConfig::fine(vec![Modality::Grayscale]);
        c.view.out = 16;
        c.view.crop = 64;
        c.depth_target = true;
        c
    }

    #[test]
    fn smaller_dataset_is_prefix_of_larger() {
        let task = TaskSpec::round();
        let cfg = small_cfg();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = generate_demos(&task, 30, &cfg, 9, a.path(), 1).unwrap();
        let sb = generate_demos(&task, 70, &cfg, 9, b.path(), 2).unwrap();
        assert_eq!((sa.frames, sb.frames), (30, 70));
        assert_eq!(sa.config_hash, sb.config_hash);
        let ra = DatasetReader::open(a.path()).unwrap();
        let rb = DatasetReader::open(b.path()).unwrap();
        let la = ra.load(&["grayscale", "action", "depth_target"], 30).unwrap();
        let lb = rb.load(&["grayscale", "action", "depth_target"], 30).unwrap();
        assert_eq!(la, lb);
        assert!(rb.manifest.episodes.iter().all(|e| e.frames > 0));
        let set = demo_training_set(&rb, Modality::Grayscale, &cfg.expert.cap, 50, true).unwrap();
        assert_eq!((set.len(), set.input_shape), (50, [1, 16, 16]));
        assert_eq!(set.depth.as_ref().unwrap().len(), 50 * 256);
        // CHW of a one-channel image is its HWC layout; actions are scaled by the cap
        assert_eq!(&set.inputs[..256], &lb[0][..256]);
        assert!((set.targets[2] as f64 - lb[1][2] as f64 / cfg.expert.cap.linear).abs() < 1e-6);
        assert!(set.targets.iter().all(|v| v.abs() <= 1.0 + 1e-6));
    }

    #[test]
    fn labels_are_capped_and_episodes_mostly_succeed() {
        let task = TaskSpec::square(0.0005);
        let mut cfg = small_cfg();
        cfg.view.crop = 32;
        cfg.view.out = 8;
        let mut ok = 0;
        for i in 0..4 {
            let r = record_episode(&task, &cfg, 3, i).unwrap();
            ok += r.success as usize;
            for f in &r.frames {
                let a = Twist::from_array(std::array::from_fn(|k| f[1].data[k] as f64));
                assert!(a.within(&cfg.expert.cap));
                assert_eq!(f[0].channels, 1);
            }
        }
        assert!(ok >= 3, "{ok}/4");
    }

    #[test]
    fn init_targets_match_projection() {
        let task = TaskSpec::square(0.0005);
        let mut cfg = InitDataConfig::default();
        cfg.randomize = false;
        cfg.full_frame = 32;
        let (obj, img, a) = init_sample(&task, &cfg, 4, 0).unwrap();
        assert_eq!((img.height, img.width, img.channels), (32, 32, 3));
        let cam = nominal_camera();
        let (u, v, d) = cam.project_world(&cfg.task_space.neutral, &obj.translation).unwrap();
        assert_eq!([u, v, d], [a[0], a[1], a[2]]);
        assert!((a[3] - obj.yaw()).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        cfg.chunk = 3;
        let s = generate_init_net_data(&task, 7, &cfg, 4, dir.path(), 1).unwrap();
        assert_eq!((s.frames, s.episodes), (7, 3));
        let r = DatasetReader::open(dir.path()).unwrap();
        let anchors = &r.load(&["anchor"], 1).unwrap()[0];
        assert_eq!(anchors[0], a[0] as f32);
    }
}
