//! Analytic scenes with closed-form rendering, the kitti-micro toy scene,
//! dataset generation and evaluation metrics.

use std::collections::HashMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::par;
use crate::renderer::{Camera, ChannelImages, Intrinsics, Ray, RenderedPixel};
use crate::scene::{interpolate_pose, rotation_angle_between, rotation_z, Aabb, Keyframe, ObjectTrack};
use crate::{Error, Result};

/// Shape of a primitive in its local frame.
#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Box { center: [f64; 3], half: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
    /// Infinite layer `z_min <= z <= z_max` of the local frame.
    Slab { z_min: f64, z_max: f64 },
}

/// Constant-density primitive, optionally moving along keyframes that place
/// its local frame in the world.
#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub density: f64,
    pub albedo: [f64; 3],
    pub category: usize,
    /// 0 for stuff.
    pub instance: u32,
    pub motion: Vec<Keyframe>,
}

impl Primitive {
    pub fn fixed(shape: Shape, density: f64, albedo: [f64; 3], category: usize, instance: u32) -> Self {
        Self {
            shape,
            density,
            albedo,
            category,
            instance,
            motion: Vec::new(),
        }
    }

    fn to_local(&self, time: f64, x: [f64; 3], d: [f64; 3]) -> ([f64; 3], [f64; 3]) {
        if self.motion.is_empty() {
            return (x, d);
        }
        let (r, t) = interpolate_pose(&self.motion, time);
        let p = r.transpose() * (Vector3::from(x) - t);
        let u = r.transpose() * Vector3::from(d);
        ([p[0], p[1], p[2]], [u[0], u[1], u[2]])
    }

    pub fn contains(&self, x: [f64; 3], time: f64) -> bool {
        let (p, _) = self.to_local(time, x, [0.0; 3]);
        match self.shape {
            Shape::Box { center, half } => (0..3).all(|i| (p[i] - center[i]).abs() <= half[i]),
            Shape::Sphere { center, radius } => {
                (0..3).map(|i| (p[i] - center[i]).powi(2)).sum::<f64>() <= radius * radius
            }
            Shape::Slab { z_min, z_max } => p[2] >= z_min && p[2] <= z_max,
        }
    }

    /// Parameter interval where the ray `o + t d` is inside the primitive.
    pub fn interval(&self, o: [f64; 3], d: [f64; 3], time: f64) -> Option<(f64, f64)> {
        let (o, d) = self.to_local(time, o, d);
        match self.shape {
            Shape::Box { center, half } => {
                let min = std::array::from_fn(|i| center[i] - half[i]);
                let max = std::array::from_fn(|i| center[i] + half[i]);
                slab_intersect(o, d, min, max)
            }
            Shape::Sphere { center, radius } => {
                let oc: [f64; 3] = std::array::from_fn(|i| o[i] - center[i]);
                let a = d.iter().map(|v| v * v).sum::<f64>();
                let b = 2.0 * (0..3).map(|i| oc[i] * d[i]).sum::<f64>();
                let c = oc.iter().map(|v| v * v).sum::<f64>() - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc <= 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                Some(((-b - s) / (2.0 * a), (-b + s) / (2.0 * a)))
            }
            Shape::Slab { z_min, z_max } => {
                if d[2].abs() < 1e-300 {
                    return (o[2] >= z_min && o[2] <= z_max).then_some((f64::NEG_INFINITY, f64::INFINITY));
                }
                let (a, b) = ((z_min - o[2]) / d[2], (z_max - o[2]) / d[2]);
                Some((a.min(b), a.max(b)))
            }
        }
    }
}

fn slab_intersect(o: [f64; 3], d: [f64; 3], min: [f64; 3], max: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for i in 0..3 {
        if d[i].abs() < 1e-300 {
            if o[i] < min[i] || o[i] > max[i] {
                return None;
            }
            continue;
        }
        let (a, b) = ((min[i] - o[i]) / d[i], (max[i] - o[i]) / d[i]);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t1 > t0).then_some((t0, t1))
}

/// Field value of an analytic scene at a point.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticPoint {
    pub density: f64,
    pub color: [f64; 3],
    pub semantic: Vec<f64>,
    pub instance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    pub num_classes: usize,
    pub background_class: usize,
}

impl AnalyticScene {
    pub fn validate(&self) -> Result<()> {
        let mut owners: HashMap<u32, usize> = HashMap::new();
        for (i, p) in self.primitives.iter().enumerate() {
            if !(p.density >= 0.0) {
                return Err(Error::InvalidConfig(format!("primitive {i} has negative density")));
            }
            if p.category >= self.num_classes {
                return Err(Error::InvalidConfig(format!("primitive {i} category out of range")));
            }
            if p.instance != 0 {
                // Several primitives may form one instance, but then they
                // must agree on class and motion.
                if let Some(&j) = owners.get(&p.instance) {
                    let q = &self.primitives[j];
                    if q.category != p.category || q.motion != p.motion {
                        return Err(Error::InvalidConfig(format!(
                            "instance {} is shared by unrelated primitives",
                            p.instance
                        )));
                    }
                } else {
                    owners.insert(p.instance, i);
                }
            }
        }
        Ok(())
    }

    pub fn instance_slots(&self) -> usize {
        self.primitives.iter().map(|p| p.instance as usize).max().unwrap_or(0) + 1
    }

    /// Point query. Overlapping primitives add densities; color and labels
    /// are the density-weighted mixture of the overlapping primitives.
    pub fn point(&self, x: [f64; 3], time: f64) -> AnalyticPoint {
        let active: Vec<&Primitive> = self.primitives.iter().filter(|p| p.contains(x, time)).collect();
        self.mix(&active)
    }

    fn mix(&self, active: &[&Primitive]) -> AnalyticPoint {
        let mut out = AnalyticPoint {
            density: 0.0,
            color: [0.0; 3],
            semantic: vec![0.0; self.num_classes],
            instance: vec![0.0; self.instance_slots()],
        };
        let total: f64 = active.iter().map(|p| p.density).sum();
        out.density = total;
        if total > 0.0 {
            for p in active {
                let w = p.density / total;
                for c in 0..3 {
                    out.color[c] += w * p.albedo[c];
                }
                out.semantic[p.category] += w;
                out.instance[p.instance as usize] += w;
            }
        }
        out
    }

    /// Exact rendering: ray/primitive intervals split the ray into pieces of
    /// constant density and emission, each integrated in closed form.
    /// `weights` holds one entry per piece.
    pub fn oracle_render(&self, ray: &Ray, time: f64) -> RenderedPixel {
        let mut cuts = vec![ray.t_near, ray.t_far];
        let mut spans = Vec::new();
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some((a, b)) = p.interval(ray.origin, ray.dir, time) {
                let (a, b) = (a.max(ray.t_near), b.min(ray.t_far));
                if a < b {
                    cuts.push(a);
                    cuts.push(b);
                    spans.push((i, a, b));
                }
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();

        let slots = self.instance_slots();
        let mut color = [0.0; 3];
        let mut semantic = vec![0.0; self.num_classes];
        let mut instance = vec![0.0; slots];
        let mut depth = 0.0;
        let mut trans = 1.0;
        let mut weights = Vec::with_capacity(cuts.len());
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let mid = 0.5 * (a + b);
            let active: Vec<&Primitive> = spans
                .iter()
                .filter(|&&(_, s, e)| s <= mid && mid <= e)
                .map(|&(i, _, _)| &self.primitives[i])
                .collect();
            let v = self.mix(&active);
            let len = b - a;
            let tau = v.density * len;
            let alpha = -(-tau).exp_m1();
            let weight = trans * alpha;
            weights.push(weight as f32);
            if v.density > 0.0 {
                // Integral of sigma * T(s) * (a + s) over the piece.
                let first_moment = a * alpha + (alpha - tau * (-tau).exp()) / v.density;
                depth += trans * first_moment;
                for c in 0..3 {
                    color[c] += weight * v.color[c];
                }
                for (s, x) in semantic.iter_mut().zip(&v.semantic) {
                    *s += weight * x;
                }
                for (s, x) in instance.iter_mut().zip(&v.instance) {
                    *s += weight * x;
                }
            }
            trans *= (-tau).exp();
        }
        let opacity = 1.0 - trans;
        for c in 0..3 {
            color[c] += trans * self.background[c];
        }
        RenderedPixel {
            color: color.map(|v| v as f32),
            depth: depth as f32,
            semantic_logits: semantic.into_iter().map(|v| v as f32).collect(),
            instance_logits: instance.into_iter().map(|v| v as f32).collect(),
            opacity: opacity as f32,
            weights,
        }
    }

    /// Oracle opacity and unnormalized depth in double precision.
    pub fn oracle_opacity_depth(&self, ray: &Ray, time: f64) -> (f64, f64) {
        let mut cuts = vec![ray.t_near, ray.t_far];
        for p in &self.primitives {
            if let Some((a, b)) = p.interval(ray.origin, ray.dir, time) {
                cuts.extend([a, b].into_iter().filter(|&t| t > ray.t_near && t < ray.t_far));
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let (mut trans, mut depth) = (1.0f64, 0.0f64);
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let sigma = self.point(ray.at(0.5 * (a + b)), time).density;
            let tau = sigma * (b - a);
            if sigma > 0.0 {
                let alpha = -(-tau).exp_m1();
                depth += trans * (a * alpha + (alpha - tau * (-tau).exp()) / sigma);
            }
            trans *= (-tau).exp();
        }
        (1.0 - trans, depth)
    }

    pub fn render_image(&self, camera: &Camera, bounds: &Aabb) -> ChannelImages {
        let (w, h) = (camera.width(), camera.height());
        let pixels = par::map_indices(w * h, |i| match camera.pixel_ray(i % w, i / w, bounds) {
            Some(ray) => self.oracle_render(&ray, camera.shutter_time),
            None => RenderedPixel {
                color: self.background.map(|c| c as f32),
                depth: 0.0,
                semantic_logits: vec![0.0; self.num_classes],
                instance_logits: vec![0.0; self.instance_slots()],
                opacity: 0.0,
                weights: Vec::new(),
            },
        });
        ChannelImages::from_pixels(w, h, &pixels, self.background_class as u32)
    }
}

/// Random boxes, spheres and slabs inside `[-1, 1]^3`, for oracle tests.
pub fn random_analytic_scene(seed: u64) -> AnalyticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=4);
    let mut primitives = Vec::with_capacity(count);
    for i in 0..count {
        let center: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
        let shape = match rng.random_range(0..3) {
            0 => Shape::Box {
                center,
                half: std::array::from_fn(|_| rng.random_range(0.1..0.5)),
            },
            1 => Shape::Sphere {
                center,
                radius: rng.random_range(0.1..0.5),
            },
            _ => {
                let z = rng.random_range(-0.8..0.6);
                Shape::Slab {
                    z_min: z,
                    z_max: z + rng.random_range(0.05..0.4),
                }
            }
        };
        primitives.push(Primitive::fixed(
            shape,
            rng.random_range(0.2..8.0),
            std::array::from_fn(|_| rng.random::<f64>()),
            rng.random_range(1..3),
            i as u32 + 1,
        ));
    }
    AnalyticScene {
        primitives,
        background: [0.0; 3],
        num_classes: 3,
        background_class: 0,
    }
}

/// One rendered view of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetView {
    pub camera: Camera,
    pub time: f64,
    pub color: Vec<[f32; 3]>,
    /// Supervision labels, possibly corrupted; `None` is ignored.
    pub labels: Vec<Option<u32>>,
    pub gt: ChannelImages,
}

/// Renders every camera with the oracle. With `flip_rate > 0` each label is
/// replaced by a uniformly chosen different class with that probability.
pub fn generate_dataset(scene: &AnalyticScene, bounds: &Aabb, cameras: &[Camera], flip_rate: f64, seed: u64) -> Result<Vec<DatasetView>> {
    if !(0.0..=1.0).contains(&flip_rate) {
        return Err(Error::InvalidConfig("label flip rate must lie in [0, 1]".into()));
    }
    scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cameras
        .iter()
        .map(|camera| {
            let gt = scene.render_image(camera, bounds);
            let labels = gt
                .semantic
                .iter()
                .map(|&l| Some(corrupt(l, scene.num_classes, flip_rate, &mut rng)))
                .collect();
            Ok(DatasetView {
                camera: camera.clone(),
                time: camera.shutter_time,
                color: gt.color.clone(),
                labels,
                gt,
            })
        })
        .collect()
}

fn corrupt(label: u32, classes: usize, rate: f64, rng: &mut ChaCha8Rng) -> u32 {
    if rate > 0.0 && classes > 1 && rng.random::<f64>() < rate {
        let other = rng.random_range(0..classes as u32 - 1);
        if other >= label {
            other + 1
        } else {
            other
        }
    } else {
        label
    }
}

/// Posed views of a scene with ground truth, split for training and
/// held-out evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub class_table: Vec<String>,
    pub bounds: Aabb,
    pub background: [f32; 3],
    pub background_class: usize,
    /// Ground-truth box tracks of the things.
    pub tracks: Vec<ObjectTrack>,
    pub seed: u64,
    pub flip_rate: f64,
    pub train: Vec<DatasetView>,
    pub heldout: Vec<DatasetView>,
}

/// Renders the training and held-out cameras of a toy scene.
pub fn toy_dataset(toy: &ToyScene, flip_rate: f64, seed: u64) -> Result<Dataset> {
    let train = generate_dataset(&toy.analytic, &toy.bounds, &toy.train_cameras, flip_rate, seed)?;
    // Held-out labels are never used for supervision; keep them clean.
    let heldout = generate_dataset(&toy.analytic, &toy.bounds, &toy.heldout_cameras, 0.0, seed)?;
    Ok(Dataset {
        name: toy.name.clone(),
        class_table: toy.class_table.clone(),
        bounds: toy.bounds,
        background: toy.analytic.background.map(|c| c as f32),
        background_class: toy.analytic.background_class,
        tracks: toy.tracks.clone(),
        seed,
        flip_rate,
        train,
        heldout,
    })
}

/// The kitti-micro scene: road slab, a building, a pole and two moving cars
/// under a sky background, filmed by cameras driving along a line.
#[derive(Clone, Debug)]
pub struct ToyScene {
    pub name: String,
    pub analytic: AnalyticScene,
    pub class_table: Vec<String>,
    pub bounds: Aabb,
    /// Box tracks of the things, matching the analytic motion.
    pub tracks: Vec<ObjectTrack>,
    pub train_cameras: Vec<Camera>,
    pub heldout_cameras: Vec<Camera>,
}

pub const KITTI_MICRO: &str = "kitti-micro";
pub const SCENE_NAMES: &[&str] = &[KITTI_MICRO];

pub fn scene_by_name(name: &str) -> Result<ToyScene> {
    match name {
        KITTI_MICRO => Ok(kitti_micro()),
        _ => Err(Error::InvalidConfig(format!(
            "unknown scene {name:?}; known scenes: {}",
            SCENE_NAMES.join(", ")
        ))),
    }
}

pub const KITTI_CLASSES: [&str; 5] = ["sky", "road", "building", "pole", "car"];
pub const CAR_CLASS: usize = 4;
const KEYFRAME_TIMES: usize = 8;
const KEYFRAME_DT: f64 = 0.5;

/// Body and cabin of a car in its box frame (box center at the origin).
fn car_parts(body_half: [f64; 3], cabin_half: [f64; 3], box_half_z: f64, clearance: f64) -> [Shape; 2] {
    let body_z = -box_half_z + clearance + body_half[2];
    let cabin_z = body_z + body_half[2] + cabin_half[2];
    [
        Shape::Box {
            center: [0.0, 0.0, body_z],
            half: body_half,
        },
        Shape::Box {
            center: [-0.15 * body_half[0], 0.0, cabin_z],
            half: cabin_half,
        },
    ]
}

pub fn kitti_micro() -> ToyScene {
    let bounds = Aabb::new([-6.0, -1.5, -0.3], [6.0, 6.0, 3.5]).expect("static bounds");
    let solid = 20.0;
    let mut primitives = vec![
        Primitive::fixed(Shape::Slab { z_min: -0.3, z_max: 0.0 }, solid, [0.35, 0.35, 0.38], 1, 0),
        Primitive::fixed(
            Shape::Box {
                center: [-1.0, 4.5, 1.5],
                half: [3.0, 1.0, 1.5],
            },
            solid,
            [0.72, 0.46, 0.32],
            2,
            0,
        ),
        Primitive::fixed(
            Shape::Box {
                center: [2.5, 2.6, 1.25],
                half: [0.18, 0.18, 1.25],
            },
            solid,
            [0.88, 0.85, 0.22],
            3,
            0,
        ),
    ];

    let extent = [2.0, 1.1, 1.0];
    let half_z = 0.5 * extent[2];
    let body = [0.9, 0.45, 0.28];
    let cabin = [0.5, 0.4, 0.16];
    let cars = [
        // (instance, start x, end x, y, start yaw, end yaw, body, cabin)
        (1u32, -4.0, 1.0, 0.3, 0.0, 0.0, [0.80, 0.12, 0.10], [0.20, 0.20, 0.26]),
        (2u32, 4.0, -2.0, 1.8, 0.0, 0.26, [0.15, 0.32, 0.80], [0.85, 0.85, 0.90]),
    ];
    let mut tracks = Vec::new();
    for (id, x0, x1, y, yaw0, yaw1, body_albedo, cabin_albedo) in cars {
        let keyframes: Vec<Keyframe> = (0..KEYFRAME_TIMES)
            .map(|k| {
                let s = k as f64 / (KEYFRAME_TIMES - 1) as f64;
                Keyframe {
                    time: k as f64 * KEYFRAME_DT,
                    rotation: rotation_z(yaw0 + s * (yaw1 - yaw0)),
                    translation: Vector3::new(x0 + s * (x1 - x0), y, 0.02 + half_z),
                }
            })
            .collect();
        let parts = car_parts(body, cabin, half_z, 0.08);
        for (shape, albedo) in parts.into_iter().zip([body_albedo, cabin_albedo]) {
            primitives.push(Primitive {
                shape,
                density: 30.0,
                albedo,
                category: CAR_CLASS,
                instance: id,
                motion: keyframes.clone(),
            });
        }
        tracks.push(ObjectTrack::new(id, CAR_CLASS, extent, keyframes).expect("valid track"));
    }

    let intrinsics = Intrinsics::from_fov(64, 48, 60.0);
    let camera = |x: f64, z: f64, time: f64| {
        Camera::look_at(intrinsics, [x, -4.5, z], [x, 3.0, 0.6], [0.0, 0.0, 1.0], time).expect("valid camera")
    };
    let train_cameras = (0..16)
        .map(|i| camera(-3.0 + 6.0 * i as f64 / 15.0, 1.6, (i / 2) as f64 * KEYFRAME_DT))
        .collect();
    let heldout_cameras = [(-2.2, 0.25), (-0.6, 1.25), (1.0, 2.25), (2.6, 3.25)]
        .into_iter()
        .map(|(x, t)| camera(x, 1.9, t))
        .collect();

    ToyScene {
        name: KITTI_MICRO.to_string(),
        analytic: AnalyticScene {
            primitives,
            background: [0.55, 0.70, 0.90],
            num_classes: KITTI_CLASSES.len(),
            background_class: 0,
        },
        class_table: KITTI_CLASSES.iter().map(|s| s.to_string()).collect(),
        bounds,
        tracks,
        train_cameras,
        heldout_cameras,
    }
}

/// Independent Gaussian pose noise on every keyframe: `sigma_t` meters per
/// translation axis and a rotation of `sigma_r_deg`-scaled normal angle
/// about a uniformly random axis.
pub fn perturb_tracks(tracks: &[ObjectTrack], sigma_t: f64, sigma_r_deg: f64, seed: u64) -> Result<Vec<ObjectTrack>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    tracks
        .iter()
        .map(|t| {
            let keyframes = t
                .keyframes()
                .iter()
                .map(|k| {
                    let axis = Vector3::from_fn(|_, _| normal(&mut rng));
                    let angle = sigma_r_deg.to_radians() * normal(&mut rng);
                    let axis = nalgebra::Unit::try_new(axis, 1e-12).unwrap_or(Vector3::z_axis());
                    let noise = nalgebra::Rotation3::from_axis_angle(&axis, angle).into_inner();
                    let shift = Vector3::from_fn(|_, _| sigma_t * normal(&mut rng));
                    Keyframe {
                        time: k.time,
                        rotation: noise * k.rotation,
                        translation: k.translation + shift,
                    }
                })
                .collect();
            ObjectTrack::new(t.instance_id, t.category, t.extent(), keyframes)
        })
        .collect()
}

/// Mean keyframe translation error (meters) and mean geodesic rotation
/// error (radians) of `estimate` against `truth`, matched by instance id.
pub fn track_errors(estimate: &[ObjectTrack], truth: &[ObjectTrack]) -> Result<(f64, f64)> {
    let (mut dt, mut dr, mut n) = (0.0, 0.0, 0usize);
    for gt in truth {
        let est = estimate
            .iter()
            .find(|e| e.instance_id == gt.instance_id)
            .ok_or(Error::UnknownInstance(gt.instance_id))?;
        if est.keyframes().len() != gt.keyframes().len() {
            return Err(Error::DimensionMismatch(format!("keyframes of instance {}", gt.instance_id)));
        }
        for (a, b) in est.keyframes().iter().zip(gt.keyframes()) {
            dt += (a.translation - b.translation).norm();
            dr += rotation_angle_between(&a.rotation, &b.rotation);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidConfig("no keyframes to compare".into()));
    }
    Ok((dt / n as f64, dr / n as f64))
}

/// `10 log10(1 / MSE)`, capped at 99 dB.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::DimensionMismatch(format!("psnr over {} and {} values", a.len(), b.len())));
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse < 1e-10 { 99.0 } else { -10.0 * mse.log10() })
}

pub fn psnr_rgb(a: &[[f32; 3]], b: &[[f32; 3]]) -> Result<f64> {
    psnr(a.as_flattened(), b.as_flattened())
}

/// Per-class IoU for classes present in `gt`; `None` for absent ones.
pub fn class_ious(pred: &[u32], gt: &[u32], classes: usize) -> Result<Vec<Option<f64>>> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch("label images differ in size".into()));
    }
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    let mut present = vec![false; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if g >= classes || p >= classes {
            return Err(Error::IndexOutOfRange {
                index: p.max(g),
                len: classes,
            });
        }
        present[g] = true;
        if p == g {
            inter[g] += 1;
            union[g] += 1;
        } else {
            union[g] += 1;
            union[p] += 1;
        }
    }
    Ok((0..classes)
        .map(|c| present[c].then(|| inter[c] as f64 / union[c] as f64))
        .collect())
}

/// Mean IoU over classes present in `gt`.
pub fn miou(pred: &[u32], gt: &[u32], classes: usize) -> Result<f64> {
    let ious: Vec<f64> = class_ious(pred, gt, classes)?.into_iter().flatten().collect();
    if ious.is_empty() {
        return Err(Error::InvalidConfig("no ground-truth classes to average".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticQuality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Panoptic quality over segments identified by `(class, instance)`; stuff
/// pixels carry instance 0, so each stuff class forms one segment. Segments
/// match when their classes agree and IoU exceeds 0.5, and all segments are
/// pooled into a single score.
pub fn panoptic_quality(pred_sem: &[u32], pred_inst: &[u32], gt_sem: &[u32], gt_inst: &[u32]) -> Result<PanopticQuality> {
    let n = gt_sem.len();
    if pred_sem.len() != n || pred_inst.len() != n || gt_inst.len() != n {
        return Err(Error::DimensionMismatch("panoptic images differ in size".into()));
    }
    let mut pred_area: HashMap<(u32, u32), usize> = HashMap::new();
    let mut gt_area: HashMap<(u32, u32), usize> = HashMap::new();
    let mut overlap: HashMap<((u32, u32), (u32, u32)), usize> = HashMap::new();
    for i in 0..n {
        let p = (pred_sem[i], pred_inst[i]);
        let g = (gt_sem[i], gt_inst[i]);
        *pred_area.entry(p).or_default() += 1;
        *gt_area.entry(g).or_default() += 1;
        *overlap.entry((p, g)).or_default() += 1;
    }
    let mut matched_pred = std::collections::HashSet::new();
    let mut matched_gt = std::collections::HashSet::new();
    let mut iou_sum = 0.0;
    let mut pairs: Vec<_> = overlap.into_iter().collect();
    pairs.sort();
    for ((p, g), inter) in pairs {
        if p.0 != g.0 {
            continue;
        }
        let union = pred_area[&p] + gt_area[&g] - inter;
        let iou = inter as f64 / union as f64;
        if iou > 0.5 {
            assert!(matched_gt.insert(g), "ground-truth segment matched twice");
            assert!(matched_pred.insert(p), "predicted segment matched twice");
            iou_sum += iou;
        }
    }
    let tp = matched_gt.len();
    let fp = pred_area.len() - matched_pred.len();
    let fn_ = gt_area.len() - tp;
    let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
    let (sq, rq) = if tp == 0 {
        (0.0, 0.0)
    } else {
        (iou_sum / tp as f64, tp as f64 / denom)
    };
    Ok(PanopticQuality {
        pq: if denom > 0.0 { iou_sum / denom } else { 0.0 },
        sq,
        rq,
        tp,
        fp,
        fn_,
    })
}

/// IoU of the pixel sets labeled `id` in two instance images.
pub fn instance_iou(pred: &[u32], gt: &[u32], id: u32) -> Option<f64> {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        let (a, b) = (p == id, g == id);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub miou: f64,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub per_class: Vec<ClassScore>,
}

/// Full report for a rendered view against ground truth.
pub fn evaluate(pred: &ChannelImages, gt: &ChannelImages, class_table: &[String]) -> Result<MetricReport> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::DimensionMismatch(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let classes = class_table.len();
    let ious = class_ious(&pred.semantic, &gt.semantic, classes)?;
    let pq = panoptic_quality(&pred.semantic, &pred.instance, &gt.semantic, &gt.instance)?;
    Ok(MetricReport {
        psnr: psnr_rgb(&pred.color, &gt.color)?,
        miou: miou(&pred.semantic, &gt.semantic, classes)?,
        pq: pq.pq,
        sq: pq.sq,
        rq: pq.rq,
        per_class: class_table
            .iter()
            .zip(ious)
            .map(|(c, iou)| ClassScore { class: c.clone(), iou })
            .collect(),
    })
}
