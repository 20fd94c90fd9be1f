//! Category-level initialization of thing fields by federated averaging.
//!
//! Each client fits a copy of the shared parameters to one object instance
//! with plain SGD; the server replaces the shared parameters by the client
//! mean. Objects live in the canonical box frame `[-1, 1]^3`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{forward_backward, CompositeSpec, Mat, ParamVector, Real, Tape, COMPOSITE_COLOR};
use crate::fields::{build_field, init_biased, Field, FieldConfig, FieldRole};
use crate::io::{field_from_bytes, field_to_bytes, read, write, Reader};
use crate::par;
use crate::renderer::{build_samples, ray_seed, Camera, Intrinsics, RayQuery, RenderOptions};
use crate::scene::{Aabb, Alphas};
use crate::synth::{psnr_rgb, AnalyticScene, Primitive, Shape};
use crate::trainer::AdamConfig;
use crate::{Error, Result};

/// A posed color image of one object in its box frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectView {
    pub camera: Camera,
    pub color: Vec<[f32; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub instance_id: u32,
    pub views: Vec<ObjectView>,
}

/// Sampling settings for object-only rendering.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectRender {
    pub samples_per_ray: usize,
    pub background: [f32; 3],
}

impl Default for ObjectRender {
    fn default() -> Self {
        Self {
            samples_per_ray: 32,
            background: [0.0; 3],
        }
    }
}

pub fn unit_box() -> Aabb {
    Aabb::new([-1.0; 3], [1.0; 3]).expect("unit box")
}

/// A supervised ray in the box frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectRay {
    pub query: RayQuery,
    pub color: [f32; 3],
}

/// Every pixel of every view as a ray clipped to the unit box.
pub fn object_rays(views: &[ObjectView]) -> Vec<ObjectRay> {
    let bounds = unit_box();
    let mut out = Vec::new();
    for v in views {
        let w = v.camera.width();
        for (k, &color) in v.color.iter().enumerate() {
            out.push(ObjectRay {
                query: RayQuery {
                    ray: v.camera.pixel_ray(k % w, k / w, &bounds),
                    time: 0.0,
                    index: out.len() as u64,
                },
                color,
            });
        }
    }
    out
}

fn render_options(r: &ObjectRender, seed: u64, jitter: bool) -> RenderOptions {
    RenderOptions {
        samples: r.samples_per_ray,
        jitter,
        seed,
        normalize_depth: false,
        background_logit: 0.0,
        alphas: Alphas::full(),
    }
}

/// Mean squared color error of `rays` and its gradient for a thing field.
pub fn object_loss_and_grad<T: Real>(
    field: &Field,
    params: &[T],
    rays: &[ObjectRay],
    render: &ObjectRender,
    seed: u64,
) -> Result<(T, Vec<T>)> {
    let opts = render_options(render, seed, true);
    let (loss, mut grads) = forward_backward(vec![params], |tape: &mut Tape<'_, T>| {
        let colors = record_object(tape, field, rays.iter().map(|r| r.query), render, &opts)?;
        let target: Vec<T> = rays
            .iter()
            .flat_map(|r| r.color.map(|c| T::from_f64_lossy(c as f64)))
            .collect();
        tape.sum_squares(colors, target, T::from_f64_lossy(1.0 / (3.0 * rays.len() as f64)))
    })?;
    Ok((loss, grads.remove(0)))
}

fn record_object<'p, T: Real>(
    tape: &mut Tape<'p, T>,
    field: &Field,
    queries: impl Iterator<Item = RayQuery>,
    render: &ObjectRender,
    opts: &RenderOptions,
) -> Result<crate::diffmath::NodeId> {
    let queries: Vec<RayQuery> = queries.collect();
    let s = build_samples::<T>(&queries, opts)?;
    let n = s.t.len();
    let x = tape.input(Mat::from_vec(n, 3, s.points.world.into_iter().flatten().collect())?)?;
    let d = tape.input(Mat::from_vec(n, 3, s.points.dirs.into_iter().flatten().collect())?)?;
    let refs = field.refs(0)?;
    let config = &field.config;
    let out = build_field(
        tape,
        config,
        &refs,
        x,
        d,
        T::from_f64_lossy(config.pos_freqs as f64),
        T::from_f64_lossy(config.dir_freqs as f64),
    )?;
    let spec = CompositeSpec {
        ray_starts: s.ray_starts,
        t: s.t,
        delta: s.delta,
        background: render.background.map(|c| T::from_f64_lossy(c as f64)),
        background_semantic: Vec::new(),
        normalize_depth: false,
    };
    let composite = tape.composite(out.density, out.color, None, None, spec)?;
    tape.columns(composite, COMPOSITE_COLOR, 3)
}

/// Renders a thing field alone (midpoint samples) from `camera`.
pub fn render_object(field: &Field, camera: &Camera, render: &ObjectRender) -> Result<Vec<[f32; 3]>> {
    let view = ObjectView {
        camera: camera.clone(),
        color: vec![[0.0; 3]; camera.width() * camera.height()],
    };
    let rays = object_rays(std::slice::from_ref(&view));
    let opts = render_options(render, 0, false);
    let chunks: Vec<&[ObjectRay]> = rays.chunks(1024).collect();
    let parts = par::map_slice(&chunks, |c| -> Result<Vec<[f32; 3]>> {
        let mut tape = Tape::new(vec![field.params.values()]);
        let node = record_object(&mut tape, field, c.iter().map(|r| r.query), render, &opts)?;
        Ok(tape.value(node).data.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect())
    });
    let mut out = Vec::with_capacity(rays.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Mean PSNR of a field over a set of views.
pub fn object_psnr(field: &Field, views: &[ObjectView], render: &ObjectRender) -> Result<f64> {
    let mut total = 0.0;
    for v in views {
        total += psnr_rgb(&render_object(field, &v.camera, render)?, &v.color)?;
    }
    Ok(total / views.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    pub outer_epochs: usize,
    pub clients: usize,
    pub inner_epochs: usize,
    pub inner_batch: usize,
    pub inner_lr: f64,
    pub field: FieldConfig,
    pub render: ObjectRender,
    pub seed: u64,
}

impl MetaConfig {
    pub fn toy(clients: usize) -> Self {
        Self {
            outer_epochs: 60,
            clients,
            inner_epochs: 3,
            inner_batch: 256,
            inner_lr: 1.0,
            field: FieldConfig::thing_toy(),
            render: ObjectRender::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.outer_epochs == 0 || self.clients == 0 || self.inner_epochs == 0 || self.inner_batch == 0 {
            return Err(Error::InvalidConfig("meta-learning counts must be at least 1".into()));
        }
        if !(self.inner_lr > 0.0) {
            return Err(Error::InvalidConfig("inner learning rate must be positive".into()));
        }
        self.field.validate()
    }
}

/// Shuffle seed of one client epoch; `epoch` counts across outer rounds so
/// that chained rounds replay an uninterrupted run.
fn epoch_seed(seed: u64, client: usize, epoch: usize) -> u64 {
    ray_seed(ray_seed(seed, client as u64), epoch as u64)
}

/// Plain SGD over `epochs` (a range of global epoch indices) of shuffled
/// ray batches of size `batch`.
pub fn sgd_epochs(
    theta: &Field,
    data: &ClientDataset,
    epochs: std::ops::Range<usize>,
    batch: usize,
    lr: f64,
    render: &ObjectRender,
    seed: u64,
    client: usize,
) -> Result<Field> {
    if data.views.is_empty() {
        return Err(Error::InvalidConfig(format!("client {} has no views", data.instance_id)));
    }
    let rays = object_rays(&data.views);
    let mut field = theta.clone();
    for epoch in epochs {
        let mut order: Vec<usize> = (0..rays.len()).collect();
        let eseed = epoch_seed(seed, client, epoch);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(eseed));
        for (b, chunk) in order.chunks(batch.max(1)).enumerate() {
            let picked: Vec<ObjectRay> = chunk.iter().map(|&i| rays[i]).collect();
            let (loss, grad) = object_loss_and_grad::<f32>(
                &field,
                field.params.values(),
                &picked,
                render,
                ray_seed(eseed, b as u64),
            )?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    step: epoch,
                    detail: format!("client {} produced a non-finite update", data.instance_id),
                });
            }
            for (p, g) in field.params.values_mut().iter_mut().zip(&grad) {
                *p -= (lr * *g as f64) as f32;
            }
        }
    }
    Ok(field)
}

/// `E` epochs of SGD from a copy of `theta` on one client's rays.
pub fn client_update(
    client: usize,
    theta: &Field,
    data: &ClientDataset,
    round: usize,
    config: &MetaConfig,
) -> Result<Field> {
    let e = config.inner_epochs;
    sgd_epochs(theta, data, round * e..(round + 1) * e, config.inner_batch, config.inner_lr, &config.render, config.seed, client)
}

/// Elementwise mean of parameter vectors, accumulated in `f64`.
pub fn average(fields: &[Field]) -> Result<ParamVector> {
    let first = fields.first().ok_or_else(|| Error::InvalidConfig("nothing to average".into()))?;
    let mut acc = vec![0.0f64; first.params.len()];
    for f in fields {
        if !f.params.same_layout(&first.params) {
            return Err(Error::DimensionMismatch("client parameter layouts differ".into()));
        }
        for (a, &v) in acc.iter_mut().zip(f.params.values()) {
            *a += v as f64;
        }
    }
    let k = fields.len() as f64;
    let mut out = first.params.clone();
    for (o, a) in out.values_mut().iter_mut().zip(acc) {
        *o = (a / k) as f32;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaCheckpoint {
    pub category: String,
    pub field: Field,
    pub outer_epochs: usize,
}

/// Runs the federated loop; `on_round` sees the shared field after each
/// outer epoch.
pub fn server_update(
    config: &MetaConfig,
    category: &str,
    clients: &[ClientDataset],
    mut on_round: impl FnMut(usize, &Field),
) -> Result<MetaCheckpoint> {
    config.validate()?;
    if clients.len() != config.clients {
        return Err(Error::InvalidConfig(format!(
            "expected {} clients, got {}",
            config.clients,
            clients.len()
        )));
    }
    let mut theta = init_biased(config.field, FieldRole::Thing, config.seed)?;
    for round in 0..config.outer_epochs {
        let indices: Vec<usize> = (0..clients.len()).collect();
        let updates = par::map_slice(&indices, |&k| client_update(k, &theta, &clients[k], round, config));
        let updates = updates.into_iter().collect::<Result<Vec<_>>>()?;
        theta.params = average(&updates)?;
        on_round(round + 1, &theta);
    }
    Ok(MetaCheckpoint {
        category: category.to_string(),
        field: theta,
        outer_epochs: config.outer_epochs,
    })
}

pub const META_MAGIC: &[u8; 8] = b"PNMETA\0\0";
pub const META_VERSION: u32 = 1;

impl MetaCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(META_MAGIC);
        out.extend_from_slice(&META_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.category.len() as u32).to_le_bytes());
        out.extend_from_slice(self.category.as_bytes());
        out.extend_from_slice(&(self.outer_epochs as u64).to_le_bytes());
        out.extend_from_slice(&field_to_bytes(&self.field));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "meta checkpoint");
        if r.take(8)? != META_MAGIC {
            return Err(Error::format("meta checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != META_VERSION {
            return Err(Error::format("meta checkpoint", format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let category = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::format("meta checkpoint", e.to_string()))?;
        let outer_epochs = r.u64()? as usize;
        let field = field_from_bytes(r.rest())?;
        if field.role != FieldRole::Thing {
            return Err(Error::RoleMismatch {
                expected: "thing",
                found: field.role.name(),
            });
        }
        Ok(Self {
            category,
            field,
            outer_epochs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read(path)?)
    }
}

/// Adam fine-tuning settings for a single object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub steps: usize,
    pub rays_per_batch: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub render: ObjectRender,
    pub seed: u64,
}

impl FitConfig {
    pub fn toy(steps: usize) -> Self {
        Self {
            steps,
            rays_per_batch: 256,
            learning_rate: 5e-3,
            adam: AdamConfig::default(),
            render: ObjectRender::default(),
            seed: 0,
        }
    }
}

/// Fits a thing field to posed object views with Adam. `on_step` runs
/// after every step with the step count and the current field; returning
/// `false` stops early.
pub fn fit_object(init: &Field, views: &[ObjectView], config: &FitConfig, mut on_step: impl FnMut(usize, &Field) -> Result<bool>) -> Result<Field> {
    if views.is_empty() {
        return Err(Error::InvalidConfig("fitting needs at least one view".into()));
    }
    let rays = object_rays(views);
    let mut field = init.clone();
    let n = field.params.len();
    let (mut m, mut v) = (vec![0.0f64; n], vec![0.0f64; n]);
    let a = config.adam;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for step in 0..config.steps {
        let batch: Vec<ObjectRay> = (0..config.rays_per_batch).map(|_| rays[rng.random_range(0..rays.len())]).collect();
        let (loss, grad) = object_loss_and_grad::<f32>(&field, field.params.values(), &batch, &config.render, ray_seed(config.seed, step as u64))?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "object fit loss is not finite".into(),
            });
        }
        let t = (step + 1) as f64;
        let (bc1, bc2) = (1.0 - a.beta1.powf(t), 1.0 - a.beta2.powf(t));
        for (i, p) in field.params.values_mut().iter_mut().enumerate() {
            let g = grad[i] as f64;
            m[i] = a.beta1 * m[i] + (1.0 - a.beta1) * g;
            v[i] = a.beta2 * v[i] + (1.0 - a.beta2) * g * g;
            *p = (*p as f64 - config.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + a.epsilon)) as f32;
        }
        if !on_step(step + 1, &field)? {
            break;
        }
    }
    Ok(field)
}

/// Fine-tunes a meta checkpoint on one to three views.
pub fn sparse_view_fit(checkpoint: &MetaCheckpoint, views: &[ObjectView], config: &FitConfig) -> Result<Field> {
    if views.is_empty() || views.len() > 3 {
        return Err(Error::InvalidConfig("sparse fitting takes one to three views".into()));
    }
    fit_object(&checkpoint.field, views, config, |_, _| Ok(true))
}

/// A procedural "vehicle": body box plus cabin box with random proportions
/// and colors, in the unit box frame.
pub fn car_shape(seed: u64) -> AnalyticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body_half = [rng.random_range(0.7..0.95), rng.random_range(0.55..0.85), rng.random_range(0.25..0.4)];
    let clearance = rng.random_range(0.1..0.25);
    let body_z = -1.0 + clearance + body_half[2];
    let cabin_half = [
        rng.random_range(0.35..0.6),
        0.85 * body_half[1],
        rng.random_range(0.18..0.3),
    ];
    let cabin_center = [rng.random_range(-0.25..0.1), 0.0, body_z + body_half[2] + cabin_half[2]];
    let hue = rng.random_range(0..3);
    let mut body_color = [rng.random_range(0.1..0.3), rng.random_range(0.1..0.3), rng.random_range(0.1..0.3)];
    body_color[hue] = rng.random_range(0.6..0.9);
    let g = rng.random_range(0.15..0.8);
    let cabin_color = [g, g, (g + 0.05f64).min(1.0)];
    AnalyticScene {
        primitives: vec![
            Primitive::fixed(
                Shape::Box {
                    center: [0.0, 0.0, body_z],
                    half: body_half,
                },
                30.0,
                body_color,
                1,
                1,
            ),
            Primitive::fixed(
                Shape::Box {
                    center: cabin_center,
                    half: cabin_half,
                },
                30.0,
                cabin_color,
                1,
                1,
            ),
        ],
        background: [0.0; 3],
        num_classes: 2,
        background_class: 0,
    }
}

/// Orbit cameras around the unit box looking at its center.
pub fn orbit_cameras(count: usize, size: usize, phase: f64) -> Vec<Camera> {
    let k = Intrinsics::from_fov(size, size, 50.0);
    (0..count)
        .map(|i| {
            let az = phase + std::f64::consts::TAU * i as f64 / count as f64;
            let el: f64 = if i % 2 == 0 { 0.35 } else { 0.6 };
            let r = 3.6;
            let eye = [r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin()];
            Camera::look_at(k, eye, [0.0; 3], [0.0, 0.0, 1.0], 0.0).expect("orbit camera")
        })
        .collect()
}

/// Oracle-rendered views of one shape.
pub fn shape_views(shape: &AnalyticScene, cameras: &[Camera]) -> Vec<ObjectView> {
    let bounds = unit_box();
    cameras
        .iter()
        .map(|c| ObjectView {
            camera: c.clone(),
            color: shape.render_image(c, &bounds).color,
        })
        .collect()
}

/// `count` car shapes with `views` orbit views each.
pub fn car_corpus(count: usize, seed: u64, views: usize, size: usize) -> Vec<ClientDataset> {
    let cameras = orbit_cameras(views, size, 0.0);
    (0..count)
        .map(|i| ClientDataset {
            instance_id: i as u32 + 1,
            views: shape_views(&car_shape(ray_seed(seed, i as u64)), &cameras),
        })
        .collect()
}
