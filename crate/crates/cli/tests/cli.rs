use std::path::Path;
use std::process::Command;

use coarse2fine::tasks::TaskSpec;
use coarse2fine_cli::commands::PoseSourceKind;
use coarse2fine_cli::sweep::{run_sweep, Preset, SweepOptions};

const BIN: &str = env!("CARGO_BIN_EXE_coarse2fine");

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).env("COARSE2FINE_THREADS", "1").output().unwrap()
}

#[test]
fn unknown_task_is_a_usage_error() {
    let out = cli(&["eval", "--task", "hexagon", "--controller", "icp_only"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown task"));
}

#[test]
fn missing_checkpoint_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let out = cli(&["eval", "--task", "round", "--controller", "end_to_end", "--poses", "1", "--out", dir]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
    assert!(!tmp.path().join("metrics.csv").exists());
}

#[test]
fn eval_appends_one_row_per_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let args = ["eval", "--task", "round", "--controller", "coarse_to_fine", "--pose-source", "ground_truth", "--poses", "2", "--seed", "3", "--out", dir];
    for _ in 0..2 {
        let out = cli(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let text = std::fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("experiment_id,seed,task,controller"));
    assert_eq!(lines[1], lines[2], "same seed, same row");
    let episodes = std::fs::read_to_string(tmp.path().join("episodes.jsonl")).unwrap();
    assert_eq!(episodes.lines().count(), 4);
}

fn tiny(out: &Path) -> SweepOptions {
    let mut o = SweepOptions::new(Preset::Robustness, out.to_path_buf());
    o.frames = Some(vec![40]);
    o.tasks = Some(vec![TaskSpec::round()]);
    o.poses = 1;
    o.epochs = 1;
    o.init_samples = 16;
    o.pose_source = PoseSourceKind::Centroid;
    o.threads = 1;
    o
}

#[test]
fn interrupted_sweep_resumes_to_the_same_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));

    let full = run_sweep(&tiny(&a)).unwrap();
    assert!(full.finished);
    assert_eq!(full.rows.len(), 5);

    let mut o = tiny(&b);
    o.max_steps = Some(3);
    let first = run_sweep(&o).unwrap();
    assert!(!first.finished);
    assert_eq!(first.ran, 3);
    o.max_steps = None;
    let rest = run_sweep(&o).unwrap();
    assert!(rest.finished);
    assert_eq!(rest.ran, first.remaining);

    let csv = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(csv(&a), csv(&b));
    assert!(b.join("plots").read_dir().unwrap().next().is_some());

    let mut changed = tiny(&b);
    changed.poses = 2;
    assert!(run_sweep(&changed).is_err(), "a different plan must not reuse the state file");
}
