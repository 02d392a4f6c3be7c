//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL` line.
//!
//! Criteria 6-9 drive the release binary through gen-data / train / eval and share
//! trained artifacts through a process-wide cache, so run them in one test process.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use coarse2fine::control::contact_model;
use coarse2fine::domain_rand::{raw_occlusion_mask, simulate_depth_artifacts, DepthArtifactConfig, RngStream};
use coarse2fine::geometry::{CameraModel, Frame, PointCloud, Pose};
use coarse2fine::icp::{icp_register, sample_surface};
use coarse2fine::nn::{grad_check, soft_argmax, spatial_softmax, LayerSpec, Mode, Sequential, Tensor};
use coarse2fine::policy::{ArchSpec, Modality, NetConfig, PolicyNet};
use coarse2fine::renderer::{render, Material};
use coarse2fine::tasks::{bottleneck_offset, build_scene, camera_mount, expert_action, ExpertConfig, ExpertState, RingState, SamplingSpec, TaskKind, TaskSpec};
use coarse2fine_cli::commands::hash_dir;
use coarse2fine_cli::metrics::{read_rows, MetricsRow};
use nalgebra::{Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

// bypasses the harness capture so the line shows for passing tests too
fn report(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

#[test]
fn criterion_1_gradients() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let conv = LayerSpec::Conv {
        in_ch: 2,
        out_ch: 3,
        kernel: 3,
        stride: 2,
        padding: 1,
    };
    let layers: Vec<(&str, Vec<LayerSpec>, Vec<usize>)> = vec![
        ("conv", vec![conv.clone()], vec![2, 2, 16, 16]),
        ("batchnorm", vec![LayerSpec::BatchNorm { channels: 2 }], vec![3, 2, 16, 16]),
        ("relu", vec![LayerSpec::Relu], vec![2, 2, 16, 16]),
        ("dropout", vec![LayerSpec::Dropout { rate: 0.5 }], vec![2, 2, 16, 16]),
        ("linear", vec![LayerSpec::Flatten, LayerSpec::Linear { inputs: 2 * 16 * 16, outputs: 5 }], vec![2, 2, 16, 16]),
        (
            "upconv",
            vec![LayerSpec::UpConv {
                in_ch: 2,
                out_ch: 3,
                kernel: 2,
                stride: 2,
            }],
            vec![2, 2, 16, 16],
        ),
        ("spatial_soft_argmax", vec![LayerSpec::SpatialSoftArgmax], vec![2, 3, 16, 16]),
        ("heatmap", vec![LayerSpec::Heatmap { sigma: 2.0, height: 16, width: 16 }], vec![2, 6]),
    ];
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for (name, specs, shape) in layers {
        let mut net = Sequential::<f64>::build(&specs, &mut rng).unwrap();
        let x = Tensor::from_vec(&shape, (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        // non-trivial running statistics before checking in eval mode
        net.run(&x, Mode::Train).unwrap();
        let e = grad_check(&mut net, &x, 1e-5, 300, Mode::Eval, 7).unwrap().max_rel_error;
        worst = worst.max(e);
        detail.push(format!("{name}={e:.1e}"));
    }
    let cfg = NetConfig {
        input: 16,
        keypoints: 4,
        widths: [4, 4, 6],
        hidden: 12,
        ..NetConfig::default()
    };
    for arch in [ArchSpec::KEYPOINT_RECON, ArchSpec::parse("keypoint").unwrap()] {
        let mut net = PolicyNet::<f32>::build(arch, Modality::Rgb, cfg, &mut rng).unwrap().cast::<f64>();
        let x = Tensor::from_vec(&[2, 3, 16, 16], (0..2 * 3 * 256).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let e = grad_check(&mut net, &x, 1e-5, 300, Mode::Eval, 8).unwrap().max_rel_error;
        worst = worst.max(e);
        detail.push(format!("{}={e:.1e}", arch.name()));
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst < 1e-3 && secs < 60.0;
    report(1, pass, &format!("max rel error {worst:.2e} in {secs:.1}s ({})", detail.join(" ")));
    assert!(pass);
}

#[test]
fn criterion_2_spatial_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (k, i, j) = (4, 9, 7);
    let mut worst_sum: f64 = 0.0;
    for _ in 0..250 {
        let h = Tensor::<f64>::from_vec(&[1, k, i, j], (0..k * i * j).map(|_| rng.gen_range(-8.0..8.0)).collect()).unwrap();
        let o = spatial_softmax(&h).unwrap();
        for c in o.data.chunks(i * j) {
            worst_sum = worst_sum.max((c.iter().sum::<f64>() - 1.0).abs());
        }
    }
    // a delta map: one huge logit
    let mut worst_delta: f64 = 0.0;
    for (di, dj) in [(0, 0), (3, 5), (8, 6), (4, 0)] {
        let mut d = vec![-1e4; i * j];
        d[di * j + dj] = 1e4;
        let kp = soft_argmax(&spatial_softmax(&Tensor::<f64>::from_vec(&[1, 1, i, j], d).unwrap()).unwrap()).unwrap();
        let want = [di as f64 / i as f64, dj as f64 / j as f64];
        worst_delta = worst_delta.max((kp.data[0] - want[0]).abs()).max((kp.data[1] - want[1]).abs());
    }
    // brute-force mean coordinate of a uniform 8×8 map
    let brute: f64 = (0..8).map(|r| r as f64 / 8.0).sum::<f64>() / 8.0;
    let kp = soft_argmax(&spatial_softmax(&Tensor::<f64>::from_vec(&[1, 1, 8, 8], vec![0.3; 64]).unwrap()).unwrap()).unwrap();
    let uni: f64 = (kp.data[0] - 7.0 / 16.0).abs().max((kp.data[1] - 7.0 / 16.0).abs()).max((brute - 7.0 / 16.0).abs());
    let pass = worst_sum < 1e-6 && worst_delta < 1e-6 && uni < 1e-6;
    report(2, pass, &format!("sum err {worst_sum:.1e} over 1000 maps, delta err {worst_delta:.1e}, uniform err {uni:.1e}"));
    assert!(pass);
}

#[test]
fn criterion_3_icp_recovery() {
    let t0 = Instant::now();
    let task = TaskSpec::square(0.0005);
    let peg = task.peg_primitives(Material::plain([0.5; 3]));
    let mut rng = RngStream::new(103, "icp_trials");
    let noise = Normal::new(0.0, 0.001).unwrap();
    let (mut good, mut monotone) = (0, true);
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let model = sample_surface(&peg, 4096, Frame::object(), &mut rng);
        // offset of at most 2 cm in a random direction, rotation of at most 10 deg about a random axis
        let r: f64 = 0.02 * rng.gen::<f64>().cbrt();
        let dir = Unit::new_normalize(Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let axis = Unit::new_normalize(Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let truth = Pose::from_axis_angle(&axis, rng.gen_range(-10f64..10.0).to_radians(), dir.into_inner() * r);
        let scene = PointCloud::new(
            model.points.iter().map(|p| truth.transform_point(p) + Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))).collect(),
            Frame::world(),
        )
        .unwrap();
        let res = icp_register(&model, &scene, &Pose::identity(), 200, 1e-10).unwrap();
        monotone &= res.rmse_history.windows(2).all(|w| w[1] <= w[0]);
        let dt = (res.pose.translation - truth.translation).norm();
        let dr = res.pose.rotation.angle_to(&truth.rotation).to_degrees();
        worst = (worst.0.max(dt * 1e3), worst.1.max(dr));
        good += (dt <= 1e-3 && dr <= 0.5) as usize;
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = good >= 95 && monotone && secs < 120.0;
    report(3, pass, &format!("{good}/100 within 1 mm / 0.5 deg (worst {:.2} mm, {:.2} deg), rmse monotone {monotone}, {secs:.1}s", worst.0, worst.1));
    assert!(pass);
}

#[test]
fn criterion_4_depth_artifacts() {
    let task = TaskSpec::round();
    let obj = Pose::from_xyz_yaw(0.0, 0.0, task.peg_height, 0.3);
    let ee = obj.compose(&Pose::from_translation(0.01, 0.0, 0.12));
    let scene = build_scene(&task, &obj, &ee);
    let cam = CameraModel::default_sensor(camera_mount());
    let frame = render(&scene, &cam).unwrap();
    let n = frame.depth_perfect.data.len();

    let cfg = DepthArtifactConfig::default();
    let out = simulate_depth_artifacts(&frame, &cfg, &mut RngStream::new(104, "depth")).unwrap();
    let below_cut_zeroed = (0..n).all(|i| frame.depth_perfect.data[i] >= cfg.min_cutoff as f32 || out.data[i] == 0.0);

    // the random drop step alone, on a frame with no occlusion or cutoff zeros
    let mut flat = frame.clone();
    flat.depth_perfect.data.iter_mut().for_each(|d| *d = 0.5);
    for m in [flat.emitter_mask_left.as_mut().unwrap(), flat.emitter_mask_right.as_mut().unwrap()] {
        m.data.iter_mut().for_each(|v| *v = 1.0);
    }
    let mut drop_only = DepthArtifactConfig::bypass();
    drop_only.drop_fraction = cfg.drop_fraction;
    let dropped = simulate_depth_artifacts(&flat, &drop_only, &mut RngStream::new(105, "depth")).unwrap();
    let frac = dropped.data.iter().filter(|&&d| d == 0.0).count() as f64 / n as f64;

    let raw = raw_occlusion_mask(&frame).unwrap();
    let bypass = simulate_depth_artifacts(&frame, &DepthArtifactConfig::bypass(), &mut RngStream::new(106, "depth")).unwrap();
    let exact = (0..n).all(|i| {
        let want = if raw.data[i] == 1 { 0.0 } else { frame.depth_perfect.data[i] };
        bypass.data[i].to_bits() == want.to_bits()
    });
    let pass = frac >= 0.001 && below_cut_zeroed && exact && raw.count() > 0;
    report(4, pass, &format!("drop fraction {:.3}%, sub-cutoff zeroed {below_cut_zeroed}, bypass bit-exact {exact}", frac * 100.0));
    assert!(pass);
}

#[test]
fn criterion_5_experts() {
    let cfg = ExpertConfig::default();
    let sampling = SamplingSpec::default();
    let mut counts = Vec::new();
    for kind in [TaskKind::Round, TaskKind::Square, TaskKind::Screw] {
        let task = TaskSpec::new(kind, None);
        let mut ok = 0;
        for seed in 0..100u64 {
            let mut rng = RngStream::derive(105, "expert_validity", seed);
            let obj = Pose::from_xyz_yaw(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), task.peg_height, rng.gen_range(-0.45..0.45));
            let mut ee = obj.compose(&bottleneck_offset()).compose(&sampling.demo_offset(&mut rng));
            let mut st = ExpertState::new(&obj, &ee, &cfg, &mut rng);
            for _ in 0..400 {
                if task.success(&RingState::of(&obj, &ee)) {
                    break;
                }
                let a = expert_action(&task, &obj, &ee, &cfg, &mut st);
                ee = contact_model(&task, &obj, &ee, &a.integrate(&ee, 0.05));
            }
            ok += task.success(&RingState::of(&obj, &ee)) as usize;
        }
        counts.push((task.label(), ok));
    }
    let pass = counts.iter().all(|(_, ok)| *ok >= 99);
    report(5, pass, &format!("{counts:?}"));
    assert!(pass);
}

// ---- CLI-driven criteria -------------------------------------------------------

const BIN: &str = env!("CARGO_BIN_EXE_coarse2fine");
const EPOCHS: &str = "20";
const INIT_SAMPLES: &str = "5000";
const INIT_EPOCHS: &str = "20";
const POSES: &str = "20";
const EVAL_SEED: &str = "2024";

static HEAVY: Mutex<()> = Mutex::new(());

fn work_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn cli(args: &[&str]) {
    let t0 = Instant::now();
    let out = Command::new(BIN).args(args).env("COARSE2FINE_THREADS", "1").output().expect("spawn cli");
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    eprintln!("[{:>6.1}s] {}", t0.elapsed().as_secs_f64(), args.join(" "));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct TaskArtifacts {
    init: PathBuf,
    fine: Vec<(usize, PathBuf)>,
    e2e: Vec<(usize, PathBuf)>,
    build_secs: f64,
}

/// Datasets, init network and fine (optionally end-to-end) checkpoints for one task.
fn build_task(name: &str, task: &str, tol: &str, sizes: &[usize], with_e2e: bool) -> TaskArtifacts {
    let t0 = Instant::now();
    let root = work_dir().join(name);
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let largest = sizes.iter().max().unwrap().to_string();
    let (init_data, init) = (root.join("init_data"), root.join("init_ckpt"));
    cli(&["gen-data", "--task", task, "--tolerance-mm", tol, "--kind", "init", "--frames", INIT_SAMPLES, "--seed", "11", "--out", p(&init_data)]);
    cli(&["train", "--dataset", p(&init_data), "--arch", "keypoint", "--modality", "rgb", "--epochs", INIT_EPOCHS, "--seed", "12", "--out", p(&init)]);
    let fine_data = root.join("fine_data");
    cli(&["gen-data", "--task", task, "--tolerance-mm", tol, "--kind", "fine", "--frames", &largest, "--seed", "13", "--out", p(&fine_data)]);
    let mut fine = Vec::new();
    for &n in sizes {
        let out = root.join(format!("fine_{n}"));
        cli(&["train", "--dataset", p(&fine_data), "--arch", "keypoint_recon", "--modality", "rgb", "--frames", &n.to_string(), "--epochs", EPOCHS, "--seed", "14", "--out", p(&out)]);
        fine.push((n, out));
    }
    let mut e2e = Vec::new();
    if with_e2e {
        let data = root.join("e2e_data");
        cli(&["gen-data", "--task", task, "--tolerance-mm", tol, "--kind", "end_to_end", "--frames", &largest, "--seed", "15", "--out", p(&data)]);
        for &n in sizes {
            let out = root.join(format!("e2e_{n}"));
            cli(&["train", "--dataset", p(&data), "--arch", "keypoint", "--modality", "rgb", "--frames", &n.to_string(), "--epochs", EPOCHS, "--seed", "16", "--out", p(&out)]);
            e2e.push((n, out));
        }
    }
    TaskArtifacts {
        init,
        fine,
        e2e,
        build_secs: t0.elapsed().as_secs_f64(),
    }
}

fn round_artifacts() -> &'static TaskArtifacts {
    static A: OnceLock<TaskArtifacts> = OnceLock::new();
    A.get_or_init(|| build_task("round", "round", "5", &[10_000], false))
}

/// One evaluation row under 3 mm / 1 deg calibration bias and depth artifacts.
fn evaluate(out: &Path, id: &str, task: &str, tol: &str, controller: &str, ckpt: Option<&Path>, init: &Path, extra: &[&str]) -> MetricsRow {
    let mut args = vec!["eval", "--task", task, "--tolerance-mm", tol, "--controller", controller, "--poses", POSES, "--seed", EVAL_SEED];
    args.extend(["--bias-mm", "3", "--bias-deg", "1", "--experiment-id", id, "--out", p(out)]);
    if controller != "end_to_end" {
        args.extend(["--init-checkpoint", p(init), "--pose-source", "learned"]);
    }
    if let Some(c) = ckpt {
        args.extend(["--checkpoint", p(c)]);
    }
    args.extend(extra);
    cli(&args);
    read_rows(&out.join("metrics.csv")).unwrap().into_iter().find(|r| r.experiment_id == id).expect("row written")
}

#[test]
fn criterion_6_round_peg_coarse_to_fine() {
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let a = round_artifacts();
    let out = work_dir().join("c6");
    let _ = std::fs::remove_dir_all(&out);
    let row = evaluate(&out, "c6", "round", "5", "coarse_to_fine", Some(&a.fine[0].1), &a.init, &[]);
    let secs = a.build_secs + t0.elapsed().as_secs_f64();
    let pass = row.success_rate >= 0.9 && secs <= 4.0 * 3600.0;
    report(6, pass, &format!("success {:.2} on 20 poses, mean final error {:.2} mm, {:.0} s total", row.success_rate, row.mean_final_err_mm, secs));
    assert!(pass);
}

#[test]
fn criterion_7_ordering_square_half_mm() {
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let sizes = [2_000, 5_000, 10_000];
    let a = build_task("square", "square", "0.5", &sizes, true);
    let out = work_dir().join("c7");
    let _ = std::fs::remove_dir_all(&out);
    let icp = evaluate(&out, "icp_only", "square", "0.5", "icp_only", None, &a.init, &[]);
    let mut lines = vec![format!("icp_only {:.2}", icp.success_rate)];
    let mut pass = true;
    for (i, &n) in sizes.iter().enumerate() {
        let c2f = evaluate(&out, &format!("c2f_{n}"), "square", "0.5", "coarse_to_fine", Some(&a.fine[i].1), &a.init, &[]);
        let e2e = evaluate(&out, &format!("e2e_{n}"), "square", "0.5", "end_to_end", Some(&a.e2e[i].1), &a.init, &[]);
        pass &= c2f.success_rate >= e2e.success_rate;
        if n == 10_000 {
            pass &= c2f.success_rate > icp.success_rate;
        }
        lines.push(format!("{n}: c2f {:.2} e2e {:.2}", c2f.success_rate, e2e.success_rate));
    }
    report(7, pass, &lines.join(", "));
    assert!(pass);
}

#[test]
fn criterion_8_speed_scaling() {
    let _g = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let a = round_artifacts();
    let out = work_dir().join("c8");
    let _ = std::fs::remove_dir_all(&out);
    let mut counts = Vec::new();
    for s in ["0.5", "1", "2"] {
        let row = evaluate(&out, &format!("speed_{s}"), "round", "5", "coarse_to_fine", Some(&a.fine[0].1), &a.init, &["--speed-scale", s]);
        counts.push((s, (row.success_rate * 20.0).round() as i64));
    }
    let base = counts[1].1;
    let pass = counts.iter().all(|(_, c)| (c - base).abs() <= 2);
    report(8, pass, &format!("successes out of 20 per speed scale {counts:?}"));
    assert!(pass);
}

#[test]
fn criterion_9_determinism() {
    let root = work_dir().join("c9");
    let _ = std::fs::remove_dir_all(&root);
    let mut digests = Vec::new();
    for run in ["a", "b"] {
        let r = root.join(run);
        let (data, ckpt, init_data, init, ev) = (r.join("data"), r.join("ckpt"), r.join("init_data"), r.join("init"), r.join("eval"));
        cli(&["gen-data", "--task", "square", "--frames", "400", "--seed", "21", "--out", p(&data)]);
        cli(&["gen-data", "--task", "square", "--kind", "init", "--frames", "200", "--seed", "22", "--out", p(&init_data)]);
        cli(&["train", "--dataset", p(&data), "--arch", "keypoint_recon", "--epochs", "2", "--seed", "23", "--out", p(&ckpt)]);
        cli(&["train", "--dataset", p(&init_data), "--arch", "keypoint", "--epochs", "1", "--seed", "24", "--out", p(&init)]);
        let base = ["eval", "--task", "square", "--poses", "4", "--seed", "25", "--out", p(&ev)];
        cli(&[&base[..], &["--checkpoint", p(&ckpt), "--init-checkpoint", p(&init)]].concat());
        cli(&[&base[..], &["--controller", "icp_only", "--pose-source", "centroid"]].concat());
        let metrics = std::fs::read(ev.join("metrics.csv")).unwrap();
        digests.push((hash_dir(&data).unwrap(), hash_dir(&init_data).unwrap(), hash_dir(&ckpt).unwrap(), hash_dir(&init).unwrap(), metrics));
    }
    let same = [digests[0].0 == digests[1].0, digests[0].1 == digests[1].1, digests[0].2 == digests[1].2, digests[0].3 == digests[1].3, digests[0].4 == digests[1].4];
    let pass = same.iter().all(|&s| s);
    report(9, pass, &format!("datasets {} {}, checkpoints {} {}, metrics.csv {}", same[0], same[1], same[2], same[3], same[4]));
    assert!(pass);
}
