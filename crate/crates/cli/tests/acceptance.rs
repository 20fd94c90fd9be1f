//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `cargo test -p panfield-cli --test acceptance [-- <name filters>]`
//!
//! Exits 0 regardless of outcome unless `PANFIELD_ACCEPTANCE_STRICT=1`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector4};
use panfield_cli::{cmd_edit, dataset_cameras, cmd_gen, cmd_meta_train, cmd_train, ConfigArgs, EditArgs, GenArgs, MetaTrainArgs, TrainArgs};
use panfield_core::fields::{init_biased, Field, FieldConfig, FieldRole};
use panfield_core::io::{load_dataset, load_scene, read_channels, save_cameras, save_scene};
use panfield_core::metainit::{
    average, car_corpus, car_shape, fit_object, object_psnr, orbit_cameras, server_update, sgd_epochs, shape_views, FitConfig,
    MetaCheckpoint, MetaConfig,
};
use panfield_core::renderer::{composite, sample_points, Camera, ChannelImages, Intrinsics, Ray, RenderOptions, ShadedSample};
use panfield_core::scene::{
    orthogonality_residual, pose_at, project_so3, rotation_z, world_to_box, Aabb, Alphas, ObjectTrack, SceneModel, Thing,
    KEYFRAME_PARAMS,
};
use panfield_core::synth::{
    class_ious, instance_iou, kitti_micro, miou, panoptic_quality, perturb_tracks, psnr, random_analytic_scene, toy_dataset,
    track_errors, AnalyticScene, Dataset, CAR_CLASS,
};
use panfield_core::trainer::{
    initial_scene, loss_and_grad, render_view, sample_batch, train, Profile, SupervisionSet, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

/// Shared artifacts: the generated dataset and the frozen-track model are
/// reused by several criteria.
struct Ctx {
    root: PathBuf,
    data: Option<(PathBuf, Dataset)>,
    static_model: Option<(PathBuf, f64)>,
}

impl Ctx {
    fn dataset(&mut self) -> Result<(PathBuf, Dataset)> {
        if self.data.is_none() {
            let dir = self.root.join("kitti-micro");
            cmd_gen(&GenArgs {
                scene: "kitti-micro".into(),
                out: dir.clone(),
                seed: 0,
                flip_rate: 0.0,
                force: true,
            })?;
            let data = load_dataset(&dir)?;
            self.data = Some((dir, data));
        }
        Ok(self.data.clone().expect("dataset"))
    }

    /// kitti-micro fitted for 3000 steps with ground-truth tracks frozen.
    fn static_model(&mut self) -> Result<(PathBuf, f64)> {
        if self.static_model.is_none() {
            let (data, _) = self.dataset()?;
            let out = self.root.join("static");
            let t = Instant::now();
            cmd_train(&TrainArgs {
                data,
                out: out.clone(),
                config: ConfigArgs::default(),
                steps: Some(3000),
                meta_init: None,
                no_track_opt: true,
                no_things: false,
            })?;
            self.static_model = Some((out, t.elapsed().as_secs_f64()));
        }
        Ok(self.static_model.clone().expect("model"))
    }
}

const RENDER_SAMPLES: usize = 128;

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn gradient_oracle(_: &mut Ctx) -> Result<Verdict> {
    let data = toy_dataset(&kitti_micro(), 0.0, 3)?;
    let sup = SupervisionSet::from_dataset(&data)?;
    let scene = initial_scene(&data, Profile::Toy, 5, true)?;
    let batch = sample_batch(&sup, &scene, 48, 17);
    let opts = RenderOptions {
        samples: 24,
        jitter: true,
        seed: 9,
        alphas: Alphas {
            position: 1.0,
            direction: 0.6,
        },
        ..RenderOptions::default()
    };
    let params = scene.params::<f64>();
    let (_, grads) = loss_and_grad(&scene, &params, &batch, 0.05, &opts, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut probes = Vec::new();
    let field_blocks = 1 + params.num_things();
    while probes.len() < 150 {
        let b = rng.random_range(0..field_blocks);
        probes.push((b, rng.random_range(0..params.blocks[b].len())));
    }
    while probes.len() < 200 {
        let b = params.track_block(rng.random_range(0..params.num_things()));
        let key = rng.random_range(0..params.blocks[b].len() / KEYFRAME_PARAMS);
        probes.push((b, key * KEYFRAME_PARAMS + rng.random_range(0..KEYFRAME_PARAMS)));
    }
    let scale = grads.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let h = 1e-6;
    let mut worst = 0.0f64;
    for &(b, i) in &probes {
        let eval = |delta: f64| -> Result<f64> {
            let mut p = params.clone();
            p.blocks[b][i] += delta;
            Ok(loss_and_grad(&scene, &p, &batch, 0.05, &opts, 2)?.0.total)
        };
        let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst = worst.max(rel_err(grads[b][i], fd, 1e-6 * scale));
    }
    verdict(worst < 1e-3, format!("200 probes (150 field, 50 pose), worst relative error {worst:.2e}"))
}

fn oracle_rays(seed: u64, count: usize) -> Vec<Ray> {
    let bounds = Aabb::new([-1.0; 3], [1.0; 3]).expect("bounds");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rays = Vec::new();
    while rays.len() < count {
        let o: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = o.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-3 {
            continue;
        }
        let origin = o.map(|v| 3.0 * v / n);
        let target: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.6..0.6));
        let d: [f64; 3] = std::array::from_fn(|i| target[i] - origin[i]);
        let len = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dir = d.map(|v| v / len);
        if let Some((t0, t1)) = bounds.intersect(origin, dir) {
            rays.push(Ray::new(origin, dir, t0, t1).expect("ray"));
        }
    }
    rays
}

fn renderer_oracle(_: &mut Ctx) -> Result<Verdict> {
    let n = 4096;
    let (mut worst_o, mut worst_d, mut failing, mut total) = (0.0f64, 0.0f64, 0, 0);
    for seed in 0..50 {
        let scene = random_analytic_scene(1000 + seed);
        for ray in oracle_rays(seed, 6) {
            let (o, d) = scene.oracle_opacity_depth(&ray, 0.0);
            let samples: Vec<ShadedSample> = sample_points(&ray, n, false, 0)?
                .into_iter()
                .map(|(t, delta)| {
                    let p = scene.point(ray.at(t), 0.0);
                    ShadedSample {
                        t,
                        delta,
                        density: p.density,
                        color: p.color,
                        semantic_logits: p.semantic,
                        instance_logits: p.instance,
                    }
                })
                .collect();
            let px = composite(&samples, scene.background, false);
            let bin = (ray.t_far - ray.t_near) / n as f64;
            let eo = (px.opacity as f64 - o).abs();
            let ed = (px.depth as f64 - d).abs() / bin;
            worst_o = worst_o.max(eo);
            worst_d = worst_d.max(ed);
            failing += usize::from(eo >= 1e-3 || ed >= 1.0);
            total += 1;
        }
    }
    verdict(
        failing == 0,
        format!("50 scenes x 6 rays at n = 4096: worst opacity error {worst_o:.2e}, worst depth error {worst_d:.2} bins, {failing}/{total} rays outside tolerance"),
    )
}

fn composition(_: &mut Ctx) -> Result<Verdict> {
    let classes: Vec<String> = ["sky", "ground", "car", "bus"].iter().map(|s| s.to_string()).collect();
    let stuff = init_biased(FieldConfig::stuff_toy(classes.len()), FieldRole::Stuff, 1)?;
    let thing = |id: u32, cat: usize, center: [f64; 3], yaw: f64, seed: u64| -> Result<Thing> {
        Ok(Thing {
            track: ObjectTrack::fixed(id, cat, [1.2, 0.8, 0.6], rotation_z(yaw), Vector3::from(center))?,
            field: init_biased(FieldConfig::thing_toy(), FieldRole::Thing, seed)?,
        })
    };
    let scene = SceneModel::new(
        stuff,
        vec![thing(1, 2, [0.0; 3], 0.3, 7)?, thing(2, 3, [0.4, 0.2, 0.1], -0.5, 8)?],
        classes,
        Aabb::new([-2.0; 3], [2.0; 3])?,
        [0.0; 3],
        0,
    )?;
    let full = |f: &Field| (f.config.pos_freqs as f64, f.config.dir_freqs as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut points, mut dirs) = (Vec::new(), Vec::new());
    while points.len() < 10_000 {
        let x: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.8..0.9));
        let d: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let d = d.map(|v| v / n);
        let clear = scene.things.iter().all(|t| {
            world_to_box(&t.track, 0.0, x, d)
                .x_local
                .iter()
                .all(|v| (v.abs() - 1.0).abs() > 1e-4)
        });
        if clear {
            points.push(x);
            dirs.push(d);
        }
    }
    let times = vec![0.0; points.len()];
    let got = scene.compose_batch_in::<f64>(&points, &dirs, &times, Alphas::full())?;
    let (mut worst, mut overlap) = (0.0f64, 0);
    for (i, (x, d)) in points.iter().zip(&dirs).enumerate() {
        let (mut density, mut color, mut sem, mut inst, mut inside) = (0.0f64, [0.0f64; 3], vec![0.0f64; 4], vec![0.0f64; 3], 0);
        for t in &scene.things {
            let q = world_to_box(&t.track, 0.0, *x, *d);
            if !q.inside {
                continue;
            }
            inside += 1;
            let (ax, ad) = full(&t.field);
            let s = t.field.eval_batch_in(&[q.x_local], &[q.d_local], ax, ad)?.remove(0);
            density += s.density;
            for c in 0..3 {
                color[c] += s.color[c];
            }
            sem[t.track.category] += s.density;
            inst[t.track.instance_id as usize] += s.density;
        }
        if inside == 0 {
            let (ax, ad) = full(&scene.stuff);
            let s = scene.stuff.eval_batch_in(&[scene.bounds.normalize(*x)], &[*d], ax, ad)?.remove(0);
            density = s.density;
            color = s.color;
            sem = s.semantic_logits.clone();
            inst[0] = 1.0;
        }
        overlap += usize::from(inside == 2);
        let g = &got[i];
        worst = worst.max((g.density - density).abs());
        for c in 0..3 {
            worst = worst.max((g.color[c] - color[c]).abs());
        }
        if inside > 0 {
            for (a, b) in g.semantic_logits.iter().zip(&sem) {
                worst = worst.max((a - b).abs());
            }
            for (a, b) in g.instance_logits.iter().zip(&inst) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    verdict(
        worst < 1e-6 && overlap > 0,
        format!("10^4 points ({overlap} in both boxes), worst deviation {worst:.2e}"),
    )
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let q = Vector4::from_fn(|_, _| StandardNormal.sample(rng));
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(q))
        .to_rotation_matrix()
        .into_inner()
}

fn so3_projection(_: &mut Ctx) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let candidates: Vec<Matrix3<f64>> = (0..10_000).map(|_| random_rotation(&mut rng)).collect();
    let noise = Normal::new(0.0, 0.05)?;
    let (mut beaten, mut worst_residual) = (0, 0.0f64);
    for _ in 0..1000 {
        let m = random_rotation(&mut rng) + Matrix3::from_fn(|_, _| noise.sample(&mut rng));
        let r = project_so3(&m)?;
        worst_residual = worst_residual.max(orthogonality_residual(&r));
        let best = (r - m).norm();
        beaten += usize::from(candidates.iter().any(|c| (c - m).norm() < best - 1e-12));
    }
    verdict(
        beaten == 0 && worst_residual < 1e-6,
        format!("1000 matrices vs 10^4 random rotations: {beaten} beaten, worst residual {worst_residual:.1e}"),
    )
}

struct ViewScores {
    psnr: f64,
    miou: f64,
    pq: f64,
}

fn score_views(scene: &SceneModel, views: &[panfield_core::synth::DatasetView], classes: &[String]) -> Result<(ViewScores, Vec<ChannelImages>)> {
    let mut renders = Vec::new();
    let (mut p, mut m, mut q) = (0.0, 0.0, 0.0);
    for v in views {
        let img = render_view(scene, v, RENDER_SAMPLES)?;
        let r = panfield_core::synth::evaluate(&img, &v.gt, classes)?;
        p += r.psnr;
        m += r.miou;
        q += r.pq;
        renders.push(img);
    }
    let n = views.len() as f64;
    Ok((
        ViewScores {
            psnr: p / n,
            miou: m / n,
            pq: q / n,
        },
        renders,
    ))
}

fn static_fit(ctx: &mut Ctx) -> Result<Verdict> {
    let (_, data) = ctx.dataset()?;
    let (dir, secs) = ctx.static_model()?;
    let scene = load_scene(&dir)?;
    let (train, _) = score_views(&scene, &data.train, &data.class_table)?;
    let (held, _) = score_views(&scene, &data.heldout, &data.class_table)?;
    verdict(
        train.psnr > 28.0 && held.psnr > 24.0 && held.miou > 0.85 && secs < 1800.0,
        format!(
            "train PSNR {:.2} dB, held-out PSNR {:.2} dB, held-out mIoU {:.3}, training {secs:.0} s",
            train.psnr, held.psnr, held.miou
        ),
    )
}

/// Per-car instance IoU pooled over the held-out views, and the IoU of the
/// car-class semantic mask against the union of car instances.
fn car_ious(renders: &[ChannelImages], data: &Dataset) -> (Vec<(u32, f64)>, f64) {
    let (mut pi, mut gi, mut ps, mut gs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (img, v) in renders.iter().zip(&data.heldout) {
        pi.extend_from_slice(&img.instance);
        gi.extend_from_slice(&v.gt.instance);
        ps.extend(img.semantic.iter().map(|&c| u32::from(c as usize == CAR_CLASS)));
        gs.extend(v.gt.semantic.iter().map(|&c| u32::from(c as usize == CAR_CLASS)));
    }
    let per_car = data
        .tracks
        .iter()
        .map(|t| (t.instance_id, instance_iou(&pi, &gi, t.instance_id).unwrap_or(0.0)))
        .collect();
    (per_car, instance_iou(&ps, &gs, 1).unwrap_or(0.0))
}

fn dynamic_panoptic(ctx: &mut Ctx) -> Result<Verdict> {
    let (data_dir, data) = ctx.dataset()?;
    let (dir, static_secs) = ctx.static_model()?;
    let scene = load_scene(&dir)?;
    let (held, renders) = score_views(&scene, &data.heldout, &data.class_table)?;
    let (per_car, _) = car_ious(&renders, &data);

    let t = Instant::now();
    let out = ctx.root.join("no-things");
    let stuff_only = cmd_train(&TrainArgs {
        data: data_dir,
        out,
        config: ConfigArgs::default(),
        steps: Some(3000),
        meta_init: None,
        no_track_opt: true,
        no_things: true,
    })?;
    let ablation_secs = t.elapsed().as_secs_f64();
    let (_, renders) = score_views(&stuff_only, &data.heldout, &data.class_table)?;
    let (ablated, car_class) = car_ious(&renders, &data);
    let ablated_best = ablated.iter().map(|c| c.1).fold(0.0, f64::max);
    let secs = static_secs + ablation_secs;
    let cars_ok = per_car.iter().all(|c| c.1 > 0.8);
    let cars: Vec<String> = per_car.iter().map(|(id, iou)| format!("car {id} {iou:.3}")).collect();
    verdict(
        cars_ok && held.pq > 0.6 && ablated_best < 0.2 && secs < 2700.0,
        format!(
            "held-out instance IoU {}, PQ {:.3}; things disabled: car instance IoU {ablated_best:.3}, car-class mask IoU {car_class:.3}; {secs:.0} s",
            cars.join(", "),
            held.pq
        ),
    )
}

fn track_recovery(ctx: &mut Ctx) -> Result<Verdict> {
    let (_, data) = ctx.dataset()?;
    let sup = SupervisionSet::from_dataset(&data)?;
    let t = Instant::now();
    let mut dt = Vec::new();
    let mut dr = Vec::new();
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let mut scene = initial_scene(&data, Profile::Toy, seed, true)?;
        let noisy = perturb_tracks(&data.tracks, 0.2, 5.0, 100 + seed)?;
        for (thing, track) in scene.things.iter_mut().zip(noisy) {
            thing.track = track;
        }
        let tracks = |s: &SceneModel| s.things.iter().map(|t| t.track.clone()).collect::<Vec<_>>();
        let (t0, r0) = track_errors(&tracks(&scene), &data.tracks)?;
        let mut config = TrainConfig::toy();
        config.seed = seed;
        config.log_every = 0;
        train(&mut scene, &sup, &config, |_| Ok(()))?;
        let (t1, r1) = track_errors(&tracks(&scene), &data.tracks)?;
        dt.push(1.0 - t1 / t0);
        dr.push(1.0 - r1 / r0);
        rows.push(format!(
            "seed {seed}: t {:.3}->{:.3} m, R {:.2}->{:.2} deg",
            t0,
            t1,
            r0.to_degrees(),
            r1.to_degrees()
        ));
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (mt, mr) = (median(&mut dt), median(&mut dr));
    let secs = t.elapsed().as_secs_f64();
    verdict(
        mt >= 0.5 && mr >= 0.3 && secs < 2700.0,
        format!(
            "median reduction: translation {:.0}%, rotation {:.0}% ({}); {secs:.0} s",
            100.0 * mt,
            100.0 * mr,
            rows.join("; ")
        ),
    )
}

fn steps_to_psnr(init: &Field, views: &[panfield_core::metainit::ObjectView], config: &MetaConfig, target: f64) -> Result<Option<usize>> {
    let mut reached = None;
    fit_object(init, views, &FitConfig::toy(300), |step, f| {
        if step % 5 == 0 && object_psnr(f, views, &config.render)? >= target {
            reached = Some(step);
            return Ok(false);
        }
        Ok(true)
    })?;
    Ok(reached)
}

fn meta_init(ctx: &mut Ctx) -> Result<Verdict> {
    let t = Instant::now();
    let out = ctx.root.join("meta");
    let path = cmd_meta_train(&MetaTrainArgs {
        out,
        config: ConfigArgs::default(),
        category: "car".into(),
    })?;
    let ck = MetaCheckpoint::load(&path)?;
    let config = MetaConfig::toy(8);
    let biased = init_biased(config.field, FieldRole::Thing, 0)?;

    let views = shape_views(&car_shape(999), &orbit_cameras(8, 24, 0.3));
    let meta_steps = steps_to_psnr(&ck.field, &views, &config, 25.0)?;
    let biased_steps = steps_to_psnr(&biased, &views, &config, 25.0)?;
    let ratio = match (meta_steps, biased_steps) {
        (Some(m), Some(b)) => m as f64 / b as f64,
        (Some(_), None) => 0.0,
        _ => f64::INFINITY,
    };

    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..3u64 {
        let views = shape_views(&car_shape(1000 + seed), &orbit_cameras(8, 24, 0.3 + seed as f64));
        let (one, rest) = views.split_at(1);
        let mut fit = FitConfig::toy(SPARSE_FIT_STEPS);
        fit.seed = seed;
        let m = object_psnr(&fit_object(&ck.field, one, &fit, |_, _| Ok(true))?, rest, &config.render)?;
        let b = object_psnr(&fit_object(&biased, one, &fit, |_, _| Ok(true))?, rest, &config.render)?;
        wins += usize::from(m > b);
        pairs.push(format!("{m:.2} vs {b:.2}"));
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        ratio <= 0.5 && wins == 3 && secs < 3600.0,
        format!(
            "steps to 25 dB: meta {meta_steps:?} vs biased {biased_steps:?} (ratio {ratio:.2}); 1-view held-out PSNR meta vs biased: {}; {secs:.0} s",
            pairs.join(", ")
        ),
    )
}

const SPARSE_FIT_STEPS: usize = 100;

fn fedavg(_: &mut Ctx) -> Result<Verdict> {
    let mut config = MetaConfig::toy(1);
    config.outer_epochs = 3;
    config.inner_epochs = 2;
    config.inner_batch = 40;
    config.inner_lr = 0.5;
    config.render.samples_per_ray = 12;
    config.seed = 21;
    let clients = car_corpus(1, 3, 2, 8);
    let ck = server_update(&config, "car", &clients, |_, _| {})?;
    let theta = init_biased(config.field, FieldRole::Thing, config.seed)?;
    let total = config.outer_epochs * config.inner_epochs;
    let direct = sgd_epochs(&theta, &clients[0], 0..total, config.inner_batch, config.inner_lr, &config.render, config.seed, 0)?;
    let bit_equal = ck
        .field
        .params
        .values()
        .iter()
        .zip(direct.params.values())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let (mut plus, mut minus) = (theta.clone(), theta.clone());
    for (i, (p, m)) in plus.params.values_mut().iter_mut().zip(minus.params.values_mut()).enumerate() {
        let d = 2f32.powi(-(8 + (i % 5) as i32));
        *p += d;
        *m -= d;
    }
    let avg = average(&[plus, minus])?;
    let worst = avg
        .values()
        .iter()
        .zip(theta.params.values())
        .map(|(a, t)| ((a - t).abs() / t.abs().max(1e-3)) as f64)
        .fold(0.0, f64::max);
    verdict(
        bit_equal && worst <= 1e-6,
        format!("K=1 equals sequential SGD bit for bit: {bit_equal}; symmetric average worst relative deviation {worst:.1e}"),
    )
}

fn metric_suite(_: &mut Ctx) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<f32> = (0..999).map(|_| rng.random()).collect();
    let b: Vec<f32> = (0..999).map(|_| rng.random()).collect();
    let mse = a.iter().zip(&b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    let psnr_err = (psnr(&a, &b)? - (-10.0 * mse.log10())).abs();

    let (w, h) = (9, 7);
    let board: Vec<u32> = (0..w * h).map(|i| ((i % w + i / w) % 2) as u32).collect();
    let shifted: Vec<u32> = (0..w * h).map(|i| (((i % w + 1) % w + i / w) % 2) as u32).collect();
    let mut iou = 0.0;
    for c in 0..2u32 {
        let inter = board.iter().zip(&shifted).filter(|(x, y)| **x == c && **y == c).count();
        let union = board.iter().zip(&shifted).filter(|(x, y)| **x == c || **y == c).count();
        iou += inter as f64 / union as f64;
    }
    let miou_err = (miou(&shifted, &board, 2)? - iou / 2.0).abs();
    let self_iou = class_ious(&board, &board, 2)?;

    let gt_sem: Vec<u32> = (0..16).map(|i| if i < 10 { 1 } else { 3 }).collect();
    let gt_inst: Vec<u32> = (0..16).map(|i| if i < 10 { 1 } else { 2 }).collect();
    let pr_sem: Vec<u32> = (0..16).map(|i| if i < 6 { 1 } else { 2 }).collect();
    let pr_inst: Vec<u32> = (0..16).map(|i| if i < 6 { 1 } else { 3 }).collect();
    let q = panoptic_quality(&pr_sem, &pr_inst, &gt_sem, &gt_inst)?;
    let pq_err = (q.pq - 0.3).abs().max((q.sq - 0.6).abs()).max((q.rq - 0.5).abs());
    let worst = psnr_err.max(miou_err).max(pq_err);
    verdict(
        worst < 1e-9 && self_iou == vec![Some(1.0), Some(1.0)] && psnr(&a, &a)? == 99.0,
        format!("PSNR error {psnr_err:.1e}, mIoU error {miou_err:.1e}, PQ hand case {:.6} (error {pq_err:.1e})", q.pq),
    )
}

fn rot_text(r: &Matrix3<f64>, t: &Vector3<f64>) -> String {
    let rs: Vec<String> = (0..9).map(|i| format!("{:.17e}", r[(i / 3, i % 3)])).collect();
    format!("\"{}, {:.17e} {:.17e} {:.17e}\"", rs.join(" "), t[0], t[1], t[2])
}

/// Pixels where `a` and `b` disagree, and how many of them lie more than
/// `band` pixels (Chebyshev) from a boundary pixel of `b`.
fn silhouette_mismatch(a: &[bool], b: &[bool], w: usize, h: usize, band: usize) -> (usize, usize) {
    let at = |x: i64, y: i64| -> Option<bool> {
        (x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h).then(|| b[y as usize * w + x as usize])
    };
    let boundary: Vec<bool> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            [(1, 0), (-1, 0), (0, 1), (0, -1)]
                .iter()
                .any(|(dx, dy)| at(x + dx, y + dy).is_some_and(|v| v != b[i]))
        })
        .collect();
    let (mut wrong, mut outside) = (0, 0);
    for i in 0..w * h {
        if a[i] == b[i] {
            continue;
        }
        wrong += 1;
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        let r = band as i64;
        let near = (-r..=r).any(|dy| {
            (-r..=r).any(|dx| {
                let (u, v) = (x + dx, y + dy);
                u >= 0 && v >= 0 && (u as usize) < w && (v as usize) < h && boundary[v as usize * w + u as usize]
            })
        });
        outside += usize::from(!near);
    }
    (wrong, outside)
}

/// Copy of `scene` whose stuff field has zero density everywhere.
fn without_stuff(scene: &SceneModel) -> SceneModel {
    let mut s = scene.clone();
    s.stuff.params.slice_mut("density.w").expect("density weights").fill(0.0);
    s.stuff.params.slice_mut("density.b").expect("density bias").fill(-200.0);
    s
}

fn editing(ctx: &mut Ctx) -> Result<Verdict> {
    let (_, data) = ctx.dataset()?;
    let (model_dir, _) = ctx.static_model()?;
    let t = Instant::now();
    let work = ctx.root.join("editing");
    let trained = load_scene(&model_dir)?;
    let toy = kitti_micro();
    // Clone: car 2 becomes a copy of car 1 placed at the half-turn image of
    // car 1 about the world z axis; two cameras related by the same half
    // turn must then see identical crops.
    let half_turn = Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0));
    let mut fixture_scene = without_stuff(&trained);
    fixture_scene.bounds = Aabb::new([-6.0, -6.0, -0.3], [6.0, 6.0, 3.5])?;
    let fixture = work.join("fixture");
    save_scene(&fixture, &fixture_scene)?;
    let time = 1.0;
    let (r1, t1) = pose_at(&trained.thing(1)?.track, time);
    let (r2, t2) = (half_turn * r1, half_turn * t1);
    let eye = t1 + Vector3::new(-2.5, -3.5, 1.2);
    let k = Intrinsics::from_fov(64, 48, 60.0);
    let cam1 = Camera::look_at(k, eye.into(), t1.into(), [0.0, 0.0, 1.0], time)?;
    let cam2 = Camera::new(k, half_turn * cam1.rotation, half_turn * cam1.center, time)?;
    save_cameras(&work.join("cam1.toml"), &[cam1])?;
    save_cameras(&work.join("cam2.toml"), &[cam2])?;
    let script = work.join("clone.txt");
    std::fs::write(
        &script,
        format!(
            "clone 1 2\nset-pose 1 {time} {}\nset-pose 2 {time} {}\nrender cam1.toml one {time}\nrender cam2.toml two {time}\n",
            rot_text(&r1, &t1),
            rot_text(&r2, &t2)
        ),
    )?;
    let edit = |ckpt: &Path, script: &Path, out: &Path| {
        cmd_edit(&EditArgs {
            ckpt: ckpt.to_path_buf(),
            script: script.to_path_buf(),
            out: out.to_path_buf(),
            cameras: None,
            config: ConfigArgs::default(),
        })
    };
    let out = work.join("clone-out");
    edit(&fixture, &script, &out)?;
    let one = read_channels(&out.join("renders"), "one", 64, 48)?;
    let two = read_channels(&out.join("renders"), "two", 64, 48)?;
    let crop1: Vec<usize> = (0..one.len()).filter(|&i| one.instance[i] == 1).collect();
    let crop2: Vec<usize> = (0..two.len()).filter(|&i| two.instance[i] == 2).collect();
    ensure!(!crop1.is_empty(), "car 1 is not visible in the clone view");
    let clone_err = crop1
        .iter()
        .flat_map(|&i| (0..3).map(move |c| (i, c)))
        .map(|(i, c)| (one.color[i][c] - two.color[i][c]).abs() as f64)
        .fold(0.0, f64::max);
    let clone_ok = crop1 == crop2 && clone_err < 1e-6;

    // Remove: no pixel keeps the removed instance.
    let cams = dataset_cameras(&data);
    let view = 8;
    std::fs::write(work.join("remove.txt"), format!("render {view} before\nremove 1\nrender {view} after\n"))?;
    let out = work.join("remove-out");
    edit(&model_dir, &work.join("remove.txt"), &out)?;
    let (w, h) = (cams[view].width(), cams[view].height());
    let before = read_channels(&out.join("renders"), "before", w, h)?;
    let after = read_channels(&out.join("renders"), "after", w, h)?;
    let had = before.instance.iter().filter(|&&l| l == 1).count();
    let left = after.instance.iter().filter(|&&l| l == 1).count();

    // Pose: rotate car 1 by 90 degrees in place and compare its silhouette
    // with the oracle scene moved the same way.
    let cam = &cams[view];
    let tp = cam.shutter_time;
    let (rp, tpos) = pose_at(&trained.thing(1)?.track, tp);
    let rq = rotation_z(std::f64::consts::FRAC_PI_2) * rp;
    std::fs::write(work.join("pose.txt"), format!("set-pose 1 {tp} {}\nrender {view} posed\n", rot_text(&rq, &tpos)))?;
    let out = work.join("pose-out");
    let edited = edit(&model_dir, &work.join("pose.txt"), &out)?;
    let posed = read_channels(&out.join("renders"), "posed", w, h)?;
    let mut oracle: AnalyticScene = toy.analytic.clone();
    let moved = &edited.thing(1)?.track;
    for p in oracle.primitives.iter_mut().filter(|p| p.instance == 1) {
        p.motion = moved.keyframes().to_vec();
    }
    let truth = oracle.render_image(cam, &toy.bounds);
    let a: Vec<bool> = posed.instance.iter().map(|&l| l == 1).collect();
    let b: Vec<bool> = truth.instance.iter().map(|&l| l == 1).collect();
    let (wrong, outside) = silhouette_mismatch(&a, &b, w, h, 2);
    let secs = t.elapsed().as_secs_f64();
    verdict(
        clone_ok && had > 0 && left == 0 && outside == 0 && b.iter().any(|&v| v) && secs < 300.0,
        format!(
            "clone: {} crop pixels, max color difference {clone_err:.1e}; remove: {had} -> {left} pixels of instance 1; pose: {wrong} silhouette pixels differ, {outside} beyond 2 px; {secs:.0} s",
            crop1.len()
        ),
    )
}

type Criterion = (&'static str, fn(&mut Ctx) -> Result<Verdict>);

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let strict = std::env::var("PANFIELD_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria: [Criterion; 11] = [
        ("gradient-oracle", gradient_oracle),
        ("renderer-oracle", renderer_oracle),
        ("composition", composition),
        ("so3-projection", so3_projection),
        ("static-fit", static_fit),
        ("dynamic-panoptic", dynamic_panoptic),
        ("track-recovery", track_recovery),
        ("meta-init", meta_init),
        ("fedavg", fedavg),
        ("metric-suite", metric_suite),
        ("editing", editing),
    ];
    let root = tempfile::tempdir().expect("temporary directory");
    let mut ctx = Ctx {
        root: root.path().to_path_buf(),
        data: None,
        static_model: None,
    };
    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let outcome = run(&mut ctx).with_context(|| format!("criterion {name}"));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(v) => {
                failed += usize::from(!v.pass);
                println!("{} {name}: {} [{secs:.1} s]", if v.pass { "PASS" } else { "FAIL" }, v.detail);
            }
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: error: {e:#} [{secs:.1} s]");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
