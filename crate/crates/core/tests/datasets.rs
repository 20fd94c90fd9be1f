use panfield_core::io::{load_dataset, load_scene, save_dataset, save_scene};
use panfield_core::synth::{generate_dataset, kitti_micro, toy_dataset};
use panfield_core::trainer::{initial_scene, Profile};

#[test]
fn label_flips_follow_the_requested_rate() {
    let toy = kitti_micro();
    let mut cams = Vec::new();
    while cams.len() * 64 * 48 < 100_000 {
        cams.extend(toy.train_cameras.iter().cloned());
    }
    let rate = 0.1;
    let views = generate_dataset(&toy.analytic, &toy.bounds, &cams, rate, 77).unwrap();
    let (mut flips, mut total) = (0usize, 0usize);
    for v in &views {
        for (l, g) in v.labels.iter().zip(&v.gt.semantic) {
            total += 1;
            flips += usize::from(l.unwrap() != *g);
        }
    }
    let p = flips as f64 / total as f64;
    let sigma = (rate * (1.0 - rate) / total as f64).sqrt();
    assert!((p - rate).abs() < 3.0 * sigma, "rate {p} over {total} pixels");
}

#[test]
fn clean_labels_match_oracle_and_regeneration_is_identical() {
    let toy = kitti_micro();
    let a = toy_dataset(&toy, 0.0, 5).unwrap();
    for v in &a.train {
        assert!(v.labels.iter().zip(&v.gt.semantic).all(|(l, g)| *l == Some(*g)));
    }
    let b = toy_dataset(&toy, 0.0, 5).unwrap();
    assert_eq!(a, b);
}

#[test]
fn dataset_and_scene_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(&kitti_micro(), 0.05, 2).unwrap();
    save_dataset(&dir.path().join("data"), &data, false).unwrap();
    assert!(save_dataset(&dir.path().join("data"), &data, false).is_err());
    let back = load_dataset(&dir.path().join("data")).unwrap();
    assert_eq!(back.class_table, data.class_table);
    assert_eq!(back.tracks, data.tracks);
    assert_eq!(back.train.len(), data.train.len());
    for (x, y) in back.train.iter().zip(&data.train) {
        assert_eq!(x.labels, y.labels);
        assert_eq!(x.color, y.color);
        assert_eq!(x.gt.semantic, y.gt.semantic);
        assert_eq!(x.camera, y.camera);
    }

    let scene = initial_scene(&data, Profile::Toy, 1, true).unwrap();
    save_scene(&dir.path().join("ckpt"), &scene).unwrap();
    let loaded = load_scene(&dir.path().join("ckpt")).unwrap();
    assert_eq!(loaded.content_hash(), scene.content_hash());
    assert_eq!(loaded, scene);
}
