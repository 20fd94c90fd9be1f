//! Joint fitting of all fields and object tracks to posed color and
//! semantic images.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{forward_backward, Real, Tape, COMPOSITE_COLOR, COMPOSITE_SEMANTIC};
use crate::fields::{alpha_at, init_biased, EncodingSchedule, FieldConfig, FieldRole};
use crate::par;
use crate::renderer::{build_samples, ray_seed, record_render, render_image, Camera, ChannelImages, RayQuery, RenderOptions};
use crate::scene::{Alphas, SceneModel, SceneParams, Thing};
use crate::synth::{Dataset, DatasetView};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub rays_per_batch: usize,
    pub samples_per_ray: usize,
    pub learning_rate: f64,
    /// Track learning rate relative to the field learning rate.
    pub track_lr_scale: f64,
    pub adam: AdamConfig,
    pub semantic_loss_scale: f64,
    pub optimize_tracks: bool,
    /// Fraction of training over which encoding bands are switched on.
    pub warmup_fraction: f64,
    /// Apply the band window to positions as well as directions.
    pub window_positions: bool,
    pub background_logit: f32,
    /// Gradient shards per batch; fixed so results do not depend on the
    /// worker count.
    pub shards: usize,
    pub log_every: usize,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Settings for toy-profile scenes.
    pub fn toy() -> Self {
        Self {
            steps: 3000,
            rays_per_batch: 256,
            samples_per_ray: 64,
            learning_rate: 5e-3,
            track_lr_scale: 0.1,
            adam: AdamConfig::default(),
            semantic_loss_scale: 0.05,
            optimize_tracks: true,
            warmup_fraction: 0.5,
            window_positions: false,
            background_logit: 10.0,
            shards: 4,
            log_every: 100,
            checkpoint_every: 0,
            seed: 0,
        }
    }

    /// Settings for full-profile scenes.
    pub fn full() -> Self {
        Self {
            rays_per_batch: 1024,
            samples_per_ray: 1024,
            learning_rate: 5e-4,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rays_per_batch == 0 {
            return Err(Error::InvalidConfig("rays_per_batch must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.semantic_loss_scale >= 0.0) {
            return Err(Error::InvalidConfig("semantic_loss_scale must be non-negative".into()));
        }
        if self.samples_per_ray < 2 || self.shards == 0 {
            return Err(Error::InvalidConfig("need >= 2 samples per ray and >= 1 shard".into()));
        }
        EncodingSchedule::new(self.steps.max(1), self.warmup_fraction)?;
        Ok(())
    }

    pub fn schedule(&self) -> EncodingSchedule {
        EncodingSchedule::new(self.steps.max(1), self.warmup_fraction).expect("validated schedule")
    }

    /// Encoding progress at `step`.
    pub fn alphas_at(&self, step: usize) -> Alphas {
        let ramp = alpha_at(&self.schedule(), step, 1);
        Alphas {
            position: if self.window_positions { ramp } else { 1.0 },
            direction: ramp,
        }
    }

    fn render_options(&self, step: usize) -> RenderOptions {
        RenderOptions {
            samples: self.samples_per_ray,
            jitter: true,
            seed: ray_seed(self.seed, step as u64),
            normalize_depth: false,
            background_logit: self.background_logit,
            alphas: self.alphas_at(step),
        }
    }
}

/// Network and sampling presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Full,
    Toy,
}

impl Profile {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Profile::Full),
            "toy" => Ok(Profile::Toy),
            other => Err(Error::InvalidConfig(format!("unknown profile {other:?} (expected full or toy)"))),
        }
    }

    pub fn stuff_config(self, num_classes: usize) -> FieldConfig {
        match self {
            Profile::Full => FieldConfig::stuff_full(num_classes),
            Profile::Toy => FieldConfig::stuff_toy(num_classes),
        }
    }

    pub fn thing_config(self) -> FieldConfig {
        match self {
            Profile::Full => FieldConfig::thing_full(),
            Profile::Toy => FieldConfig::thing_toy(),
        }
    }

    pub fn train_config(self) -> TrainConfig {
        match self {
            Profile::Full => TrainConfig::full(),
            Profile::Toy => TrainConfig::toy(),
        }
    }

    /// Samples per ray for evaluation renders.
    pub fn render_samples(self) -> usize {
        match self {
            Profile::Full => 1024,
            Profile::Toy => 128,
        }
    }
}

/// Freshly initialized scene over a dataset's classes, bounds and tracks.
/// Without `with_things` every track is dropped and stuff explains the
/// whole scene.
pub fn initial_scene(data: &Dataset, profile: Profile, seed: u64, with_things: bool) -> Result<SceneModel> {
    let stuff = init_biased(profile.stuff_config(data.class_table.len()), FieldRole::Stuff, seed)?;
    let things = if with_things {
        data.tracks
            .iter()
            .map(|t| {
                Ok(Thing {
                    track: t.clone(),
                    field: init_biased(profile.thing_config(), FieldRole::Thing, ray_seed(seed, t.instance_id as u64))?,
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    SceneModel::new(stuff, things, data.class_table.clone(), data.bounds, data.background, data.background_class)
}

/// Renders a dataset view's camera at its timestamp.
pub fn render_view(scene: &SceneModel, view: &DatasetView, samples: usize) -> Result<ChannelImages> {
    let opts = RenderOptions {
        samples,
        ..RenderOptions::default()
    };
    render_image(scene, &view.camera, view.time, &opts)
}

/// One posed supervision image.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedView {
    pub camera: Camera,
    pub time: f64,
    pub color: Vec<[f32; 3]>,
    /// `None` marks ignored pixels.
    pub labels: Vec<Option<u32>>,
}

impl From<&DatasetView> for SupervisedView {
    fn from(v: &DatasetView) -> Self {
        Self {
            camera: v.camera.clone(),
            time: v.time,
            color: v.color.clone(),
            labels: v.labels.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionSet {
    pub views: Vec<SupervisedView>,
}

impl SupervisionSet {
    pub fn new(views: Vec<SupervisedView>, num_classes: usize) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::InvalidConfig("supervision set is empty".into()));
        }
        for (i, v) in views.iter().enumerate() {
            let n = v.camera.width() * v.camera.height();
            if v.color.len() != n || v.labels.len() != n {
                return Err(Error::DimensionMismatch(format!("view {i} images do not match its camera")));
            }
            if v.labels.iter().flatten().any(|&l| l as usize >= num_classes) {
                return Err(Error::InvalidConfig(format!("view {i} has a label outside the class table")));
            }
        }
        Ok(Self { views })
    }

    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        Self::new(data.train.iter().map(SupervisedView::from).collect(), data.class_table.len())
    }

    pub fn num_pixels(&self) -> usize {
        self.views.iter().map(|v| v.color.len()).sum()
    }
}

/// A supervised ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchRay {
    pub view: usize,
    pub pixel: usize,
    pub query: RayQuery,
    pub color: [f32; 3],
    pub label: Option<u32>,
}

/// Draws `n` (view, pixel) pairs uniformly with replacement.
pub fn sample_batch(sup: &SupervisionSet, scene: &SceneModel, n: usize, seed: u64) -> Vec<BatchRay> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = sup.num_pixels();
    (0..n)
        .map(|i| {
            let mut k = rng.random_range(0..total);
            let mut view = 0;
            while k >= sup.views[view].color.len() {
                k -= sup.views[view].color.len();
                view += 1;
            }
            let v = &sup.views[view];
            let w = v.camera.width();
            BatchRay {
                view,
                pixel: k,
                query: RayQuery {
                    ray: v.camera.pixel_ray(k % w, k / w, &scene.bounds),
                    time: v.time,
                    index: i as u64,
                },
                color: v.color[k],
                label: v.labels[k],
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub rgb_loss: f64,
    pub sem_loss: f64,
    pub total: f64,
}

/// Loss and gradient over every parameter block for one batch. Works in
/// any precision so the same graph serves training and gradient checks.
pub fn loss_and_grad<T: Real>(
    scene: &SceneModel,
    params: &SceneParams<T>,
    batch: &[BatchRay],
    semantic_loss_scale: f64,
    opts: &RenderOptions,
    shards: usize,
) -> Result<(LossReport, Vec<Vec<T>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let labeled = batch.iter().filter(|r| r.label.is_some()).count();
    let rgb_scale = 1.0 / (3.0 * batch.len() as f64);
    let sem_scale = if labeled > 0 { 1.0 / labeled as f64 } else { 0.0 };
    let chunk = batch.len().div_ceil(shards.max(1));
    let pieces: Vec<&[BatchRay]> = batch.chunks(chunk).collect();
    let classes = scene.num_classes();

    let results = par::map_slice(&pieces, |piece| -> Result<(f64, f64, Vec<Vec<T>>)> {
        let mut parts = (0.0, 0.0);
        let (_, grads) = forward_backward(params.block_refs(), |tape: &mut Tape<'_, T>| {
            let queries: Vec<RayQuery> = piece.iter().map(|r| r.query).collect();
            let samples = build_samples::<T>(&queries, opts)?;
            let nodes = record_render(tape, scene, params, samples, opts)?;
            let target: Vec<T> = piece
                .iter()
                .flat_map(|r| r.color.map(|c| T::from_f64_lossy(c as f64)))
                .collect();
            let rgb = tape.columns(nodes.composite, COMPOSITE_COLOR, 3)?;
            let rgb = tape.sum_squares(rgb, target, T::from_f64_lossy(rgb_scale))?;
            let logits = tape.columns(nodes.composite, COMPOSITE_SEMANTIC, classes)?;
            let targets = piece.iter().map(|r| r.label.map(|l| l as usize)).collect();
            let sem = tape.softmax_ce(logits, targets, T::from_f64_lossy(sem_scale))?;
            parts = (tape.value(rgb).data[0].as_f64(), tape.value(sem).data[0].as_f64());
            tape.combine(vec![(rgb, T::one()), (sem, T::from_f64_lossy(semantic_loss_scale))])
        })?;
        Ok((parts.0, parts.1, grads))
    });

    let mut rgb_loss = 0.0;
    let mut sem_loss = 0.0;
    let mut total: Option<Vec<Vec<T>>> = None;
    for r in results {
        let (rgb, sem, grads) = r?;
        rgb_loss += rgb;
        sem_loss += sem;
        match &mut total {
            None => total = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
        }
    }
    Ok((
        LossReport {
            step: 0,
            rgb_loss,
            sem_loss,
            total: rgb_loss + semantic_loss_scale * sem_loss,
        },
        total.expect("at least one shard"),
    ))
}

/// Loss of a batch without gradients.
pub fn batch_loss(scene: &SceneModel, batch: &[BatchRay], semantic_loss_scale: f64, opts: &RenderOptions) -> Result<LossReport> {
    let params = scene.params::<f32>();
    let (report, _) = loss_and_grad(scene, &params, batch, semantic_loss_scale, opts, 1)?;
    Ok(report)
}

/// Adam moments for every parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(scene: &SceneModel) -> Self {
        let sizes: Vec<usize> = scene.params::<f32>().blocks.iter().map(Vec::len).collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: 0,
        }
    }

    fn matches(&self, params: &SceneParams<f32>) -> bool {
        self.m.len() == params.blocks.len() && self.m.iter().zip(&params.blocks).all(|(m, b)| m.len() == b.len())
    }
}

/// One Adam step on fields and (optionally) tracks; rotations are projected
/// back onto SO(3) afterwards.
pub fn train_step(scene: &mut SceneModel, batch: &[BatchRay], config: &TrainConfig, opt: &mut Optimizer, step: usize) -> Result<LossReport> {
    let opts = config.render_options(step);
    let mut params = scene.params::<f32>();
    if !opt.matches(&params) {
        return Err(Error::DimensionMismatch("optimizer state does not match the scene".into()));
    }
    let (mut report, grads) = loss_and_grad(scene, &params, batch, config.semantic_loss_scale, &opts, config.shards)?;
    report.step = step;
    if !report.total.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("loss rgb={} sem={}", report.rgb_loss, report.sem_loss),
        });
    }
    if let Some((b, i)) = grads
        .iter()
        .enumerate()
        .find_map(|(b, g)| g.iter().position(|v| !v.is_finite()).map(|i| (b, i)))
    {
        return Err(Error::Diverged {
            step,
            detail: format!("non-finite gradient in block {b} entry {i}"),
        });
    }

    opt.steps += 1;
    let t = opt.steps as f64;
    let a = &config.adam;
    let bc1 = 1.0 - a.beta1.powf(t);
    let bc2 = 1.0 - a.beta2.powf(t);
    let first_track = params.track_block(0);
    for (b, g) in grads.iter().enumerate() {
        let is_track = b >= first_track;
        if is_track && !config.optimize_tracks {
            continue;
        }
        let lr = config.learning_rate * if is_track { config.track_lr_scale } else { 1.0 };
        let (m, v) = (&mut opt.m[b], &mut opt.v[b]);
        for (i, (p, &gi)) in params.blocks[b].iter_mut().zip(g).enumerate() {
            let gi = gi as f64;
            let mi = a.beta1 * m[i] as f64 + (1.0 - a.beta1) * gi;
            let vi = a.beta2 * v[i] as f64 + (1.0 - a.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + a.epsilon);
            *p = (*p as f64 - update) as f32;
        }
    }

    scene.stuff.params.values_mut().copy_from_slice(&params.blocks[0]);
    let n = scene.things.len();
    for (i, thing) in scene.things.iter_mut().enumerate() {
        thing.field.params.values_mut().copy_from_slice(&params.blocks[1 + i]);
        if config.optimize_tracks {
            thing.track.unpack(&params.blocks[1 + n + i])?;
        }
    }
    Ok(report)
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub rgb_loss: f64,
    pub sem_loss: f64,
    pub total: f64,
    pub alpha: f64,
    pub wall_ms: u64,
}

pub enum TrainEvent<'a> {
    Report(TrainLogRecord),
    Checkpoint { step: usize, scene: &'a SceneModel },
}

/// Runs `config.steps` training steps and returns the loss curve (one
/// report per step). `on_event` receives periodic log records and
/// checkpoints; returning an error stops training.
pub fn train(
    scene: &mut SceneModel,
    sup: &SupervisionSet,
    config: &TrainConfig,
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<Vec<LossReport>> {
    config.validate()?;
    let mut opt = Optimizer::new(scene);
    let start = Instant::now();
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = sample_batch(sup, scene, config.rays_per_batch, ray_seed(config.seed ^ 0x5eed, step as u64));
        let report = train_step(scene, &batch, config, &mut opt, step)?;
        curve.push(report);
        let last = step + 1 == config.steps;
        if config.log_every > 0 && (step % config.log_every == 0 || last) {
            on_event(TrainEvent::Report(TrainLogRecord {
                step,
                rgb_loss: report.rgb_loss,
                sem_loss: report.sem_loss,
                total: report.total,
                alpha: alpha_at(&config.schedule(), step, scene.stuff.config.dir_freqs),
                wall_ms: start.elapsed().as_millis() as u64,
            }))?;
        }
        if config.checkpoint_every > 0 && ((step + 1) % config.checkpoint_every == 0 || last) {
            on_event(TrainEvent::Checkpoint { step: step + 1, scene })?;
        }
    }
    Ok(curve)
}
