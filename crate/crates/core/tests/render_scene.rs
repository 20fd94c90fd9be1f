use nalgebra::Vector3;
use panfield_core::fields::{init_biased, Field, FieldConfig, FieldRole};
use panfield_core::renderer::{render_image, render_queries, render_ray, Camera, Intrinsics, Ray, RayQuery, RenderOptions};
use panfield_core::scene::{rotation_z, Aabb, Alphas, ObjectTrack, SceneModel, Thing};

fn vacuum_stuff(classes: usize) -> Field {
    let mut f = init_biased(FieldConfig::stuff_toy(classes), FieldRole::Stuff, 3).unwrap();
    f.params.slice_mut("density.b").unwrap()[0] = -60.0;
    f
}

fn opaque_thing(seed: u64) -> Field {
    let mut f = init_biased(FieldConfig::thing_toy(), FieldRole::Thing, seed).unwrap();
    f.params.slice_mut("density.b").unwrap()[0] = 400.0;
    f
}

fn box_scene(instance: u32) -> SceneModel {
    SceneModel::new(
        vacuum_stuff(3),
        vec![Thing {
            track: ObjectTrack::fixed(instance, 2, [1.0, 1.0, 1.0], rotation_z(0.0), Vector3::zeros()).unwrap(),
            field: opaque_thing(5),
        }],
        vec!["void".into(), "ground".into(), "box".into()],
        Aabb::new([-3.0; 3], [3.0; 3]).unwrap(),
        [0.0; 3],
        0,
    )
    .unwrap()
}

#[test]
fn opaque_box_sets_instance_and_depth() {
    let scene = box_scene(3);
    let n = 128;
    let bounds = scene.bounds;
    for (i, y) in [-0.3, 0.0, 0.21, 0.44].iter().enumerate() {
        let origin = [-2.7, *y, 0.1];
        let dir = [1.0, 0.0, 0.0];
        let (t0, t1) = bounds.intersect(origin, dir).unwrap();
        let ray = Ray::new(origin, dir, t0, t1).unwrap();
        let px = render_ray(&scene, &ray, 0.0, n, Alphas::full(), i as u64).unwrap();
        let bin = (t1 - t0) / n as f64;
        let entry = 2.7 - 0.5;
        assert!(px.opacity > 0.999);
        let argmax = px
            .instance_logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 3);
        assert!((px.depth as f64 - entry).abs() <= bin, "depth {} vs entry {entry}", px.depth);
    }
}

#[test]
fn box_filling_the_frame_labels_every_pixel() {
    let scene = box_scene(1);
    let k = Intrinsics::from_fov(8, 6, 20.0);
    let cam = Camera::look_at(k, [-2.5, 0.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0], 0.0).unwrap();
    let img = render_image(&scene, &cam, 0.0, &RenderOptions::default()).unwrap();
    assert!(img.semantic.iter().all(|&c| c == 2));
    assert!(img.instance.iter().all(|&c| c == 1));
}

#[test]
fn empty_scene_renders_background() {
    let scene = SceneModel::new(
        vacuum_stuff(2),
        Vec::new(),
        vec!["sky".into(), "x".into()],
        Aabb::new([-1.0; 3], [1.0; 3]).unwrap(),
        [0.3, 0.4, 0.5],
        0,
    )
    .unwrap();
    let k = Intrinsics::from_fov(2, 2, 60.0);
    let cam = Camera::look_at(k, [0.0, -3.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0], 0.0).unwrap();
    let img = render_image(&scene, &cam, 0.0, &RenderOptions::default()).unwrap();
    assert!(img.semantic.iter().all(|&c| c == 0));
    assert!(img.instance.iter().all(|&c| c == 0));
    assert!(img.color.iter().all(|c| (c[2] - 0.5).abs() < 1e-4));
}

#[test]
fn ray_order_does_not_change_results() {
    let scene = box_scene(2);
    let k = Intrinsics::from_fov(6, 5, 60.0);
    let cam = Camera::look_at(k, [-2.5, 0.4, 0.3], [0.0; 3], [0.0, 0.0, 1.0], 0.0).unwrap();
    let opts = RenderOptions {
        samples: 32,
        jitter: true,
        seed: 4,
        ..RenderOptions::default()
    };
    let queries: Vec<RayQuery> = (0..30)
        .map(|i| RayQuery {
            ray: cam.pixel_ray(i % 6, i / 6, &scene.bounds),
            time: 0.0,
            index: i as u64,
        })
        .collect();
    let forward = render_queries(&scene, &queries, &opts).unwrap();
    let mut reversed = queries.clone();
    reversed.reverse();
    let mut backward = render_queries(&scene, &reversed, &opts).unwrap();
    backward.reverse();
    assert_eq!(forward, backward);
    assert_eq!(forward, render_queries(&scene, &queries, &opts).unwrap());
}
