use coarse2fine::policy::{train, ArchSpec, Modality, NetConfig, Policy, PolicyNet, TrainConfig};
use coarse2fine::tasks::dataset::DatasetReader;
use coarse2fine::tasks::demos::{demo_training_set, generate_demos, DemoConfig};
use coarse2fine::tasks::TaskSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn demos_train_and_reload() {
    let task = TaskSpec::round();
    let cfg = DemoConfig::fine(vec![Modality::Rgb]);
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));

    let s = generate_demos(&task, 48, &cfg, 5, &a, 1).unwrap();
    assert_eq!(s.frames, 48);
    generate_demos(&task, 48, &cfg, 5, &b, 1).unwrap();
    assert_eq!(dir_bytes(&a), dir_bytes(&b), "same seed, same bytes");

    let reader = DatasetReader::open(&a).unwrap();
    assert_eq!(reader.len(), 48);
    let set = demo_training_set(&reader, Modality::Rgb, &cfg.expert.cap, usize::MAX, true).unwrap();
    assert_eq!(set.len(), 48);
    assert!(set.targets.iter().all(|t| t.abs() <= 1.0 + 1e-6), "targets are in cap units");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let small = NetConfig {
        keypoints: 4,
        widths: [4, 4, 8],
        hidden: 16,
        ..NetConfig::default()
    };
    let mut net = PolicyNet::build(ArchSpec::KEYPOINT_RECON, Modality::Rgb, small, &mut rng).unwrap();
    let tc = TrainConfig {
        epochs: 3,
        batch: 16,
        ..TrainConfig::default()
    };
    let stats = train(&mut net, &set, &tc, &mut rng, |_| {}).unwrap();
    assert_eq!(stats.len(), 3);
    assert!(stats.iter().all(|s| s.loss.is_finite()));

    let ck = tmp.path().join("ck");
    let mut policy = Policy::new(net, cfg.expert.cap);
    policy.save(&ck, serde_json::json!({})).unwrap();
    let (mut back, _) = Policy::load(&ck).unwrap();

    let obs = coarse2fine::imaging::Image::from_vec(64, 64, 3, set.inputs[..64 * 64 * 3].to_vec()).unwrap();
    let x = policy.act(&obs).unwrap();
    let y = back.act(&obs).unwrap();
    assert_eq!(x.action, y.action);
    assert_eq!(y.depth_recon.map(|d| (d.height, d.width)), Some((64, 64)));
    assert_eq!(y.keypoints.map(|k| k.len()), Some(4));
}
