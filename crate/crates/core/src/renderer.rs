//! Multi-channel volume rendering: color, depth, semantics, instances and
//! opacity, alpha-composited front to back along stratified ray samples.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{CompositeSpec, NodeId, Real, Tape, COMPOSITE_COLOR, COMPOSITE_DEPTH, COMPOSITE_OPACITY, COMPOSITE_SEMANTIC};
use crate::par;
use crate::scene::{record_points, project_so3, Alphas, PointBatch, PointNodes, SceneModel, SceneParams};
use crate::{Error, Result};

/// Rays whose composited opacity stays below this are labeled background.
pub const BACKGROUND_OPACITY: f32 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: [f64; 3], dir: [f64; 3], t_near: f64, t_far: f64) -> Result<Self> {
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!("ray direction has norm {norm}")));
        }
        if !(t_near < t_far) {
            return Err(Error::InvalidConfig("ray needs t_near < t_far".into()));
        }
        Ok(Self {
            origin,
            dir,
            t_near,
            t_far,
        })
    }

    pub fn at(&self, t: f64) -> [f64; 3] {
        std::array::from_fn(|i| self.origin[i] + t * self.dir[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Pinhole with the principal point at the image center.
    pub fn from_fov(width: usize, height: usize, horizontal_fov_deg: f64) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * horizontal_fov_deg.to_radians()).tan();
        Self {
            fx,
            fy: fx,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
        }
    }

    /// Same field of view at another resolution.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let (sx, sy) = (width as f64 / self.width as f64, height as f64 / self.height as f64);
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }
}

/// Pinhole camera. The camera frame looks down +z with +x right and +y down;
/// `rotation` maps camera axes to world axes and `center` is the optical
/// center in world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
    pub shutter_time: f64,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, rotation: Matrix3<f64>, center: Vector3<f64>, shutter_time: f64) -> Result<Self> {
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0) {
            return Err(Error::InvalidConfig("focal lengths must be positive".into()));
        }
        if intrinsics.width == 0 || intrinsics.height == 0 {
            return Err(Error::InvalidConfig("image dimensions must be positive".into()));
        }
        let rotation = project_so3(&rotation)?;
        Ok(Self {
            intrinsics,
            rotation,
            center,
            shutter_time,
        })
    }

    /// Camera at `eye` looking at `target`, with `up` roughly upward in the
    /// image.
    pub fn look_at(intrinsics: Intrinsics, eye: [f64; 3], target: [f64; 3], up: [f64; 3], shutter_time: f64) -> Result<Self> {
        let eye = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye).normalize();
        let right = forward.cross(&Vector3::from(up));
        if right.norm() < 1e-9 {
            return Err(Error::InvalidConfig("look_at up vector is parallel to the view".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Self::new(intrinsics, rotation, eye, shutter_time)
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// Unit world-space direction through the center of pixel `(u, v)`.
    pub fn pixel_dir(&self, u: usize, v: usize) -> [f64; 3] {
        let k = &self.intrinsics;
        let cam = Vector3::new((u as f64 + 0.5 - k.cx) / k.fx, (v as f64 + 0.5 - k.cy) / k.fy, 1.0);
        let w = (self.rotation * cam).normalize();
        [w[0], w[1], w[2]]
    }

    /// Ray through pixel `(u, v)` clipped to `bounds`; `None` when it misses.
    pub fn pixel_ray(&self, u: usize, v: usize, bounds: &crate::scene::Aabb) -> Option<Ray> {
        let origin = [self.center[0], self.center[1], self.center[2]];
        let dir = self.pixel_dir(u, v);
        let (t0, t1) = bounds.intersect(origin, dir)?;
        Some(Ray {
            origin,
            dir,
            t_near: t0,
            t_far: t1,
        })
    }
}

/// Stratified samples `(t_i, delta_i)` over `[t_near, t_far]`: one per equal
/// bin, at the bin midpoint or uniformly inside it when jittered. Each
/// sample stands for its whole bin, so `delta_i` is the bin width.
pub fn sample_points(ray: &Ray, n: usize, jitter: bool, seed: u64) -> Result<Vec<(f64, f64)>> {
    if n < 2 {
        return Err(Error::InvalidConfig("need at least two samples per ray".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(stratified(ray.t_near, ray.t_far, n, jitter.then_some(&mut rng)))
}

fn stratified(t_near: f64, t_far: f64, n: usize, mut rng: Option<&mut ChaCha8Rng>) -> Vec<(f64, f64)> {
    let bin = (t_far - t_near) / n as f64;
    (0..n)
        .map(|i| {
            let u = match rng.as_deref_mut() {
                Some(r) => r.random::<f64>(),
                None => 0.5,
            };
            (t_near + (i as f64 + u) * bin, bin)
        })
        .collect()
}

/// Seed for ray `index` of a pass seeded with `seed` (splitmix64 finalizer).
pub fn ray_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Composited channels of one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPixel {
    pub color: [f32; 3],
    pub depth: f32,
    pub semantic_logits: Vec<f32>,
    pub instance_logits: Vec<f32>,
    pub opacity: f32,
    pub weights: Vec<f32>,
}

/// One sample along a ray together with the field value there.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadedSample {
    pub t: f64,
    pub delta: f64,
    pub density: f64,
    pub color: [f64; 3],
    pub semantic_logits: Vec<f64>,
    pub instance_logits: Vec<f64>,
}

/// Over-compositing of ordered samples against `background`.
pub fn composite(samples: &[ShadedSample], background: [f64; 3], normalize_depth: bool) -> RenderedPixel {
    let sem_cols = samples.first().map_or(0, |s| s.semantic_logits.len());
    let inst_cols = samples.first().map_or(0, |s| s.instance_logits.len());
    let spec = CompositeSpec {
        ray_starts: vec![0, samples.len()],
        t: samples.iter().map(|s| s.t).collect(),
        delta: samples.iter().map(|s| s.delta).collect(),
        background,
        background_semantic: Vec::new(),
        normalize_depth,
    };
    let density: Vec<f64> = samples.iter().map(|s| s.density).collect();
    let color: Vec<f64> = samples.iter().flat_map(|s| s.color).collect();
    let sem: Vec<f64> = samples.iter().flat_map(|s| s.semantic_logits.iter().copied()).collect();
    let inst: Vec<f64> = samples.iter().flat_map(|s| s.instance_logits.iter().copied()).collect();
    let row = crate::diffmath::composite_forward(&spec, &density, &color, &sem, sem_cols, &inst, inst_cols);
    pixel_from_row(
        &row.data.iter().map(|&v| v as f32).collect::<Vec<_>>(),
        sem_cols,
        inst_cols,
        sample_weights(&density, &spec.delta),
    )
}

/// `w_i = T_i (1 - exp(-sigma_i delta_i))`.
pub fn sample_weights<T: Real>(density: &[T], delta: &[T]) -> Vec<f32> {
    let mut trans = 1.0f64;
    density
        .iter()
        .zip(delta)
        .map(|(&s, &d)| {
            let decay = (-(s.as_f64() * d.as_f64())).exp();
            let w = trans * (1.0 - decay);
            trans *= decay;
            w as f32
        })
        .collect()
}

fn pixel_from_row(row: &[f32], sem_cols: usize, inst_cols: usize, weights: Vec<f32>) -> RenderedPixel {
    let s = COMPOSITE_SEMANTIC;
    RenderedPixel {
        color: [row[COMPOSITE_COLOR], row[COMPOSITE_COLOR + 1], row[COMPOSITE_COLOR + 2]],
        depth: row[COMPOSITE_DEPTH],
        opacity: row[COMPOSITE_OPACITY],
        semantic_logits: row[s..s + sem_cols].to_vec(),
        instance_logits: row[s + sem_cols..s + sem_cols + inst_cols].to_vec(),
        weights,
    }
}

/// Sampling and compositing settings for a render pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderOptions {
    pub samples: usize,
    pub jitter: bool,
    pub seed: u64,
    pub normalize_depth: bool,
    /// Semantic logit given to the background class for residual
    /// transmittance; zero disables it.
    pub background_logit: f32,
    pub alphas: Alphas,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            samples: 128,
            jitter: false,
            seed: 0,
            normalize_depth: false,
            background_logit: 10.0,
            alphas: Alphas::full(),
        }
    }
}

/// A ray (or a miss) at a timestamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayQuery {
    pub ray: Option<Ray>,
    pub time: f64,
    /// Index used to derive the ray's jitter seed.
    pub index: u64,
}

/// Flattened samples of a ray batch.
#[derive(Clone, Debug)]
pub struct RaySamples<T> {
    pub ray_starts: Vec<usize>,
    pub t: Vec<T>,
    pub delta: Vec<T>,
    pub points: PointBatch<T>,
}

pub fn build_samples<T: Real>(rays: &[RayQuery], opts: &RenderOptions) -> Result<RaySamples<T>> {
    if opts.samples < 2 {
        return Err(Error::InvalidConfig("need at least two samples per ray".into()));
    }
    let total = rays.iter().filter(|r| r.ray.is_some()).count() * opts.samples;
    let mut out = RaySamples {
        ray_starts: Vec::with_capacity(rays.len() + 1),
        t: Vec::with_capacity(total),
        delta: Vec::with_capacity(total),
        points: PointBatch {
            world: Vec::with_capacity(total),
            dirs: Vec::with_capacity(total),
            times: Vec::with_capacity(total),
        },
    };
    out.ray_starts.push(0);
    for q in rays {
        if let Some(ray) = &q.ray {
            let mut rng = ChaCha8Rng::seed_from_u64(ray_seed(opts.seed, q.index));
            let dir = ray.dir.map(T::from_f64_lossy);
            for (t, d) in stratified(ray.t_near, ray.t_far, opts.samples, opts.jitter.then_some(&mut rng)) {
                out.t.push(T::from_f64_lossy(t));
                out.delta.push(T::from_f64_lossy(d));
                out.points.world.push(ray.at(t).map(T::from_f64_lossy));
                out.points.dirs.push(dir);
                out.points.times.push(q.time);
            }
        }
        out.ray_starts.push(out.t.len());
    }
    Ok(out)
}

/// Tape nodes of a rendered ray batch.
#[derive(Clone, Copy, Debug)]
pub struct RenderNodes {
    /// One row per ray: `[r, g, b, depth, opacity, semantic.., instance..]`.
    pub composite: NodeId,
    pub points: PointNodes,
}

/// Records sampling, field composition and compositing for a ray batch.
pub fn record_render<'p, T: Real>(
    tape: &mut Tape<'p, T>,
    scene: &SceneModel,
    params: &SceneParams<T>,
    samples: RaySamples<T>,
    opts: &RenderOptions,
) -> Result<RenderNodes> {
    let points = record_points(tape, scene, params, &samples.points, opts.alphas)?;
    let mut background_semantic = vec![T::zero(); scene.num_classes()];
    background_semantic[scene.background_class] = T::from_f64_lossy(opts.background_logit as f64);
    let spec = CompositeSpec {
        ray_starts: samples.ray_starts,
        t: samples.t,
        delta: samples.delta,
        background: scene.background.map(|c| T::from_f64_lossy(c as f64)),
        background_semantic,
        normalize_depth: opts.normalize_depth,
    };
    let composite = tape.composite(points.density, points.color, Some(points.semantic), Some(points.instance), spec)?;
    Ok(RenderNodes { composite, points })
}

/// Renders a batch of rays without recording gradients beyond one tape.
pub fn render_rays(scene: &SceneModel, params: &SceneParams<f32>, rays: &[RayQuery], opts: &RenderOptions) -> Result<Vec<RenderedPixel>> {
    let samples = build_samples::<f32>(rays, opts)?;
    let starts = samples.ray_starts.clone();
    let delta = samples.delta.clone();
    let mut tape = Tape::new(params.block_refs());
    let nodes = record_render(&mut tape, scene, params, samples, opts)?;
    let c = scene.num_classes();
    let k = scene.instance_slots();
    let out = tape.value(nodes.composite);
    let density = &tape.value(nodes.points.density).data;
    Ok((0..rays.len())
        .map(|r| {
            let (a, b) = (starts[r], starts[r + 1]);
            pixel_from_row(out.row(r), c, k, sample_weights(&density[a..b], &delta[a..b]))
        })
        .collect())
}

/// Renders one ray: stratified sampling, composition, compositing.
pub fn render_ray(scene: &SceneModel, ray: &Ray, time: f64, n: usize, alphas: Alphas, seed: u64) -> Result<RenderedPixel> {
    let opts = RenderOptions {
        samples: n,
        jitter: false,
        seed,
        alphas,
        ..RenderOptions::default()
    };
    render_ray_with(scene, ray, time, &opts)
}

pub fn render_ray_with(scene: &SceneModel, ray: &Ray, time: f64, opts: &RenderOptions) -> Result<RenderedPixel> {
    let params = scene.params::<f32>();
    let q = RayQuery {
        ray: Some(*ray),
        time,
        index: 0,
    };
    Ok(render_rays(scene, &params, &[q], opts)?.remove(0))
}

/// Per-pixel channel grids, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelImages {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f32; 3]>,
    pub depth: Vec<f32>,
    pub semantic: Vec<u32>,
    pub instance: Vec<u32>,
    pub opacity: Vec<f32>,
}

impl ChannelImages {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Assembles grids from rendered pixels; low-opacity pixels get the
    /// background class and instance 0.
    pub fn from_pixels(width: usize, height: usize, pixels: &[RenderedPixel], background_class: u32) -> Self {
        let mut img = Self {
            width,
            height,
            color: Vec::with_capacity(pixels.len()),
            depth: Vec::with_capacity(pixels.len()),
            semantic: Vec::with_capacity(pixels.len()),
            instance: Vec::with_capacity(pixels.len()),
            opacity: Vec::with_capacity(pixels.len()),
        };
        for p in pixels {
            img.color.push(p.color);
            img.depth.push(p.depth);
            img.opacity.push(p.opacity);
            if p.opacity < BACKGROUND_OPACITY {
                img.semantic.push(background_class);
                img.instance.push(0);
            } else {
                img.semantic.push(argmax(&p.semantic_logits) as u32);
                img.instance.push(argmax(&p.instance_logits) as u32);
            }
        }
        img
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Rays per tape when rendering images.
const RENDER_CHUNK: usize = 512;

/// Renders every pixel of `camera` at `time`.
pub fn render_image(scene: &SceneModel, camera: &Camera, time: f64, opts: &RenderOptions) -> Result<ChannelImages> {
    let (w, h) = (camera.width(), camera.height());
    let rays: Vec<RayQuery> = (0..w * h)
        .map(|i| RayQuery {
            ray: camera.pixel_ray(i % w, i / w, &scene.bounds),
            time,
            index: i as u64,
        })
        .collect();
    let pixels = render_queries(scene, &rays, opts)?;
    Ok(ChannelImages::from_pixels(w, h, &pixels, scene.background_class as u32))
}

/// Renders arbitrary ray queries in parallel chunks; output order matches
/// input order.
pub fn render_queries(scene: &SceneModel, rays: &[RayQuery], opts: &RenderOptions) -> Result<Vec<RenderedPixel>> {
    let params = scene.params::<f32>();
    let chunks: Vec<&[RayQuery]> = rays.chunks(RENDER_CHUNK).collect();
    let parts = par::map_slice(&chunks, |c| render_rays(scene, &params, c, opts));
    let mut pixels = Vec::with_capacity(rays.len());
    for p in parts {
        pixels.extend(p?);
    }
    Ok(pixels)
}
