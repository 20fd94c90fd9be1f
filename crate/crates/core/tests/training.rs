use nalgebra::Vector3;
use panfield_core::diffmath::softmax_cross_entropy;
use panfield_core::fields::{init_biased, FieldConfig, FieldRole};
use panfield_core::renderer::{render_queries, Camera, Intrinsics, RenderOptions};
use panfield_core::scene::{orthogonality_residual, rotation_z, Aabb, ObjectTrack, SceneModel, Thing};
use panfield_core::synth::{generate_dataset, AnalyticScene, Primitive, Shape};
use panfield_core::trainer::{
    batch_loss, loss_and_grad, sample_batch, train, train_step, Optimizer, SupervisedView, SupervisionSet, TrainConfig,
};

fn object_scene(seed: u64, offset: f64) -> SceneModel {
    let stuff = init_biased(FieldConfig::stuff_toy(2), FieldRole::Stuff, seed).unwrap();
    let thing = Thing {
        track: ObjectTrack::fixed(1, 1, [1.2, 1.2, 1.2], rotation_z(0.0), Vector3::new(offset, 0.0, 0.0)).unwrap(),
        field: init_biased(FieldConfig::thing_toy(), FieldRole::Thing, seed + 100).unwrap(),
    };
    SceneModel::new(
        stuff,
        vec![thing],
        vec!["bg".into(), "obj".into()],
        Aabb::new([-2.0; 3], [2.0; 3]).unwrap(),
        [0.0; 3],
        0,
    )
    .unwrap()
}

fn object_views() -> SupervisionSet {
    let analytic = AnalyticScene {
        primitives: vec![Primitive::fixed(
            Shape::Box {
                center: [0.0; 3],
                half: [0.4, 0.3, 0.35],
            },
            12.0,
            [0.8, 0.3, 0.2],
            1,
            1,
        )],
        background: [0.0; 3],
        num_classes: 2,
        background_class: 0,
    };
    let k = Intrinsics::from_fov(12, 12, 45.0);
    let cams: Vec<Camera> = (0..4)
        .map(|i| {
            let a = 0.6 * i as f64 - 0.9;
            Camera::look_at(k, [3.0 * a.sin(), -3.0 * a.cos(), 0.8], [0.0; 3], [0.0, 0.0, 1.0], 0.0).unwrap()
        })
        .collect();
    let bounds = Aabb::new([-2.0; 3], [2.0; 3]).unwrap();
    let views = generate_dataset(&analytic, &bounds, &cams, 0.0, 0).unwrap();
    SupervisionSet::new(views.iter().map(SupervisedView::from).collect(), 2).unwrap()
}

fn small_config(steps: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::toy();
    c.steps = steps;
    c.rays_per_batch = 64;
    c.samples_per_ray = 32;
    c.seed = seed;
    c.log_every = 0;
    c
}

#[test]
fn two_ray_loss_matches_scalar_recomputation() {
    let scene = object_scene(1, 0.0);
    let sup = object_views();
    let batch = sample_batch(&sup, &scene, 2, 5);
    let opts = RenderOptions {
        samples: 24,
        ..RenderOptions::default()
    };
    let report = batch_loss(&scene, &batch, 0.05, &opts).unwrap();
    let queries: Vec<_> = batch.iter().map(|r| r.query).collect();
    let px = render_queries(&scene, &queries, &opts).unwrap();
    let mut rgb = 0.0f64;
    let mut sem = 0.0f64;
    for (r, p) in batch.iter().zip(&px) {
        for c in 0..3 {
            rgb += (p.color[c] as f64 - r.color[c] as f64).powi(2);
        }
        let logits: Vec<f64> = p.semantic_logits.iter().map(|&v| v as f64).collect();
        sem += softmax_cross_entropy(&logits, r.label.unwrap() as usize).unwrap();
    }
    rgb /= 6.0;
    sem /= 2.0;
    assert!((report.rgb_loss - rgb).abs() < 1e-6);
    assert!((report.sem_loss - sem).abs() < 1e-6 * sem.max(1.0));
    assert!((report.total - (rgb + 0.05 * sem)).abs() < 1e-6);
}

#[test]
fn loss_halves_within_200_steps() {
    let sup = object_views();
    let mut ratios: Vec<f64> = (0..5)
        .map(|seed| {
            let mut scene = object_scene(seed, 0.0);
            let curve = train(&mut scene, &sup, &small_config(200, seed), |_| Ok(())).unwrap();
            let head: f64 = curve[..10].iter().map(|r| r.total).sum();
            let tail: f64 = curve[190..].iter().map(|r| r.total).sum();
            tail / head
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[2] < 0.5, "ratios {ratios:?}");
}

#[test]
fn track_steps_keep_rotations_orthonormal_and_move_translations() {
    let sup = object_views();
    let mut scene = object_scene(3, 0.25);
    let before = scene.things[0].track.clone();
    let cfg = small_config(10, 0);
    let mut opt = Optimizer::new(&scene);
    for step in 0..10 {
        let batch = sample_batch(&sup, &scene, 64, step as u64);
        train_step(&mut scene, &batch, &cfg, &mut opt, step).unwrap();
        for k in scene.things[0].track.keyframes() {
            assert!(orthogonality_residual(&k.rotation) < 1e-5);
        }
    }
    assert_ne!(scene.things[0].track.keyframes()[0].translation, before.keyframes()[0].translation);
}

#[test]
fn mismatched_pose_has_translation_gradient() {
    let sup = object_views();
    let scene = object_scene(2, 0.3);
    let batch = sample_batch(&sup, &scene, 64, 1);
    let opts = RenderOptions {
        samples: 32,
        ..RenderOptions::default()
    };
    let params = scene.params::<f64>();
    let (_, grads) = loss_and_grad(&scene, &params, &batch, 0.05, &opts, 1).unwrap();
    let t = &grads[params.track_block(0)][9..12];
    assert!(t.iter().any(|g| g.abs() > 1e-8), "{t:?}");
}

#[test]
fn seeded_training_is_reproducible() {
    let sup = object_views();
    let run = || {
        let mut scene = object_scene(4, 0.1);
        let curve = train(&mut scene, &sup, &small_config(6, 9), |_| Ok(())).unwrap();
        (curve.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>(), scene.content_hash())
    };
    assert_eq!(run(), run());
}
