use convrender::camera::{OrbitPrior, POSE_DIM};
use convrender::dataset::{ingest_dataset, load_pool, DatasetManifest, ManifestEntry, MANIFEST_FILE};
use convrender::error::Error;
use convrender::imageio::save_png;
use convrender_autograd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write_manifest(root: &std::path::Path, text: &str) {
    std::fs::write(root.join(MANIFEST_FILE), text).unwrap();
}

#[test]
fn empty_list_is_a_valid_manifest_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), "[]");
    let m = ingest_dataset(dir.path()).unwrap();
    assert!(m.entries.is_empty());
    assert_eq!(m.warnings.len(), 1);
    assert!(m.summary().unwrap().is_none());
}

#[test]
fn short_pose_names_the_entry() {
    let dir = tempfile::tempdir().unwrap();
    save_png(&Tensor::full(&[3, 4, 4], 0.5), &dir.path().join("a.png")).unwrap();
    let pose = OrbitPrior::default().canonical().unwrap().flatten();
    let good = serde_json::json!(["a.png", pose.to_vec()]);
    let bad = serde_json::json!(["b.png", pose[..24].to_vec()]);
    write_manifest(dir.path(), &serde_json::json!([good, bad]).to_string());
    match ingest_dataset(dir.path()) {
        Err(Error::Dataset(problems)) => {
            assert_eq!(problems.len(), 1, "{problems:?}");
            assert!(problems[0].contains("entry 1") && problems[0].contains("b.png"), "{problems:?}");
            assert!(problems[0].contains("24"), "{problems:?}");
        }
        other => panic!("expected a dataset error, got {other:?}"),
    }
}

#[test]
fn missing_and_undecodable_images_are_itemized() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.png"), b"not a png").unwrap();
    let pose = OrbitPrior::default().canonical().unwrap().flatten().to_vec();
    write_manifest(dir.path(), &serde_json::json!({"labels": [["gone.png", pose], ["junk.png", pose]]}).to_string());
    match ingest_dataset(dir.path()) {
        Err(Error::Dataset(problems)) => {
            assert_eq!(problems.len(), 2, "{problems:?}");
            assert!(problems[0].contains("gone.png") && problems[1].contains("junk.png"));
        }
        other => panic!("expected a dataset error, got {other:?}"),
    }
}

#[test]
fn synthetic_fixture_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let prior = OrbitPrior::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut entries = Vec::new();
    for i in 0..10 {
        let name = format!("img_{i:02}.png");
        save_png(&Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng), &dir.path().join(&name)).unwrap();
        let yaw = -0.3 + 0.06 * i as f64;
        let pose: [f64; POSE_DIM] = prior.pose_at(yaw, 0.1 - 0.02 * i as f64).unwrap().flatten();
        entries.push(ManifestEntry { path: name, pose });
    }
    let written = DatasetManifest { root: dir.path().to_path_buf(), entries, warnings: Vec::new() };
    written.write().unwrap();
    let read = ingest_dataset(dir.path()).unwrap();
    assert_eq!(read, written);
    let s = read.summary().unwrap().unwrap();
    assert_eq!(s.count, 10);
    assert!((s.yaw.0 + 0.3).abs() < 1e-9 && (s.yaw.1 - 0.24).abs() < 1e-9, "{s:?}");
    let pool = load_pool(&read, 16, 8).unwrap();
    assert_eq!(pool.len(), 10);
    assert_eq!(pool[0].image.shape(), &[6, 16, 16]);
}
