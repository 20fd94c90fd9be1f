//! Object tracks on SO(3), world/box transforms and the panoptic field.
//!
//! A point outside every object box takes the stuff field's output. A point
//! inside one or more boxes takes the sum of the containing thing fields,
//! each contributing its density times a one-hot vector for its class and
//! its instance id. Instance slot 0 is the stuff slot.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffmath::{polar_factor, Mat, NodeId, ParamRef, Real, Tape};
use crate::fields::{build_field, Field, FieldRole};
use crate::{Error, Result};

/// Nearest rotation in Frobenius norm, via `U diag(1, 1, det(U V^T)) V^T`.
/// Matrices that are already rotations to rounding precision come back
/// unchanged, so stored poses survive reloading bit for bit.
pub fn project_so3(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if m.iter().all(|v| v.is_finite()) && orthogonality_residual(m) < 1e-14 && m.determinant() > 0.0 {
        return Ok(*m);
    }
    Ok(polar_factor(m)?.rotation())
}

/// `|R^T R - I|_F`.
pub fn orthogonality_residual(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

/// Geodesic angle between two rotations, in radians.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a.transpose() * b;
    ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

pub fn rotation_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Axis-aligned box in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|i| !(min[i] < max[i])) {
            return Err(Error::InvalidConfig("box min must be below max".into()));
        }
        Ok(Self { min, max })
    }

    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|i| 0.5 * (self.min[i] + self.max[i]))
    }

    pub fn half_extent(&self) -> [f64; 3] {
        std::array::from_fn(|i| 0.5 * (self.max[i] - self.min[i]))
    }

    pub fn contains(&self, x: [f64; 3]) -> bool {
        (0..3).all(|i| x[i] >= self.min[i] && x[i] <= self.max[i])
    }

    /// Maps the box onto `[-1, 1]^3`.
    pub fn normalize(&self, x: [f64; 3]) -> [f64; 3] {
        let (c, h) = (self.center(), self.half_extent());
        std::array::from_fn(|i| (x[i] - c[i]) / h[i])
    }

    /// Entry and exit distances of `o + t d`, if the ray hits the box ahead
    /// of the origin.
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i].abs() < 1e-300 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (a, b) = ((self.min[i] - origin[i]) * inv, (self.max[i] - origin[i]) * inv);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        let t0 = t0.max(0.0);
        (t1 > t0).then_some((t0, t1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub time: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Rigid track of one object: keyframed poses plus a fixed box extent.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectTrack {
    pub instance_id: u32,
    pub category: usize,
    extent: [f64; 3],
    keyframes: Vec<Keyframe>,
}

/// Floats per packed keyframe: row-major rotation then translation.
pub const KEYFRAME_PARAMS: usize = 12;

impl ObjectTrack {
    /// Builds a track; rotations are projected onto SO(3).
    pub fn new(
        instance_id: u32,
        category: usize,
        extent: [f64; 3],
        keyframes: Vec<Keyframe>,
    ) -> Result<Self> {
        if extent.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::InvalidConfig("box extent must be positive".into()));
        }
        if keyframes.is_empty() {
            return Err(Error::InvalidConfig("a track needs at least one keyframe".into()));
        }
        if keyframes.windows(2).any(|w| !(w[0].time < w[1].time)) {
            return Err(Error::InvalidConfig(
                "keyframe timestamps must be strictly increasing".into(),
            ));
        }
        let keyframes = keyframes
            .into_iter()
            .map(|k| {
                Ok(Keyframe {
                    rotation: project_so3(&k.rotation)?,
                    ..k
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            instance_id,
            category,
            extent,
            keyframes,
        })
    }

    /// A track that holds one pose for all time.
    pub fn fixed(
        instance_id: u32,
        category: usize,
        extent: [f64; 3],
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        Self::new(
            instance_id,
            category,
            extent,
            vec![Keyframe {
                time: 0.0,
                rotation,
                translation,
            }],
        )
    }

    pub fn extent(&self) -> [f64; 3] {
        self.extent
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    /// Replaces the keyframe at `time` or inserts a new one; the rotation is
    /// projected onto SO(3).
    pub fn set_pose(&mut self, time: f64, rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Result<()> {
        let rotation = project_so3(rotation)?;
        match self
            .keyframes
            .binary_search_by(|k| k.time.total_cmp(&time))
        {
            Ok(i) => {
                self.keyframes[i].rotation = rotation;
                self.keyframes[i].translation = translation;
            }
            Err(i) => self.keyframes.insert(
                i,
                Keyframe {
                    time,
                    rotation,
                    translation,
                },
            ),
        }
        Ok(())
    }

    /// Moves every keyframe by the same rigid offset.
    pub fn translate(&mut self, offset: Vector3<f64>) {
        for k in &mut self.keyframes {
            k.translation += offset;
        }
    }

    /// Keyframes bracketing `time` and the blend weight toward the second.
    /// Outside the keyframe range the boundary keyframe is held.
    pub fn bracket(&self, time: f64) -> (usize, usize, f64) {
        bracket(&self.keyframes, time)
    }

    /// Flattened keyframe parameters, [`KEYFRAME_PARAMS`] per keyframe.
    pub fn pack<T: Real>(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.keyframes.len() * KEYFRAME_PARAMS);
        for k in &self.keyframes {
            for i in 0..3 {
                for j in 0..3 {
                    out.push(T::from_f64_lossy(k.rotation[(i, j)]));
                }
            }
            out.extend(k.translation.iter().map(|&v| T::from_f64_lossy(v)));
        }
        out
    }

    /// Writes packed parameters back, projecting each rotation onto SO(3).
    pub fn unpack<T: Real>(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.keyframes.len() * KEYFRAME_PARAMS {
            return Err(Error::DimensionMismatch("packed track length".into()));
        }
        for (k, chunk) in self.keyframes.iter_mut().zip(values.chunks(KEYFRAME_PARAMS)) {
            let m = Matrix3::from_fn(|i, j| chunk[3 * i + j].as_f64());
            k.rotation = project_so3(&m)?;
            k.translation = Vector3::new(chunk[9].as_f64(), chunk[10].as_f64(), chunk[11].as_f64());
        }
        Ok(())
    }
}

/// Pose of a track at `time`: linear translation, rotation blended
/// elementwise and projected; boundary poses are held outside the range.
pub fn pose_at(track: &ObjectTrack, time: f64) -> (Matrix3<f64>, Vector3<f64>) {
    interpolate_pose(&track.keyframes, time)
}

/// [`pose_at`] over a bare keyframe list; panics when it is empty.
pub fn interpolate_pose(keyframes: &[Keyframe], time: f64) -> (Matrix3<f64>, Vector3<f64>) {
    let (a, b, w) = bracket(keyframes, time);
    let (ka, kb) = (&keyframes[a], &keyframes[b]);
    if a == b || w == 0.0 {
        return (ka.rotation, ka.translation);
    }
    let blend = ka.rotation * (1.0 - w) + kb.rotation * w;
    let translation = ka.translation * (1.0 - w) + kb.translation * w;
    // Only keyframes 180 degrees apart blend to a singular matrix; hold the
    // nearer one then.
    let rotation = project_so3(&blend).unwrap_or(if w < 0.5 { ka.rotation } else { kb.rotation });
    (rotation, translation)
}

fn bracket(keyframes: &[Keyframe], time: f64) -> (usize, usize, f64) {
    let n = keyframes.len();
    if time <= keyframes[0].time {
        return (0, 0, 0.0);
    }
    if time >= keyframes[n - 1].time {
        return (n - 1, n - 1, 0.0);
    }
    let hi = keyframes.partition_point(|k| k.time <= time);
    let lo = hi - 1;
    if keyframes[lo].time == time {
        return (lo, lo, 0.0);
    }
    let (t0, t1) = (keyframes[lo].time, keyframes[hi].time);
    (lo, hi, (time - t0) / (t1 - t0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxQuery {
    pub x_local: [f64; 3],
    pub d_local: [f64; 3],
    pub inside: bool,
}

/// World point and direction into the track's unit box frame at `time`.
pub fn world_to_box(track: &ObjectTrack, time: f64, x_world: [f64; 3], d_world: [f64; 3]) -> BoxQuery {
    let (r, t) = pose_at(track, time);
    let p = r.transpose() * (Vector3::from(x_world) - t);
    let x_local: [f64; 3] = std::array::from_fn(|i| p[i] / (0.5 * track.extent[i]));
    let u = r.transpose() * Vector3::from(d_world);
    let u = u / u.norm();
    BoxQuery {
        x_local,
        d_local: [u[0], u[1], u[2]],
        inside: x_local.iter().all(|v| v.abs() <= 1.0),
    }
}

/// Fraction of each field's encoding bands that are active.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alphas {
    pub position: f64,
    pub direction: f64,
}

impl Alphas {
    pub fn full() -> Self {
        Self {
            position: 1.0,
            direction: 1.0,
        }
    }

    fn for_field<T: Real>(&self, field: &Field) -> (T, T) {
        (
            T::from_f64_lossy(self.position * field.config.pos_freqs as f64),
            T::from_f64_lossy(self.direction * field.config.dir_freqs as f64),
        )
    }
}

/// Composited field value at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct PanopticSample<T = f32> {
    pub density: T,
    pub color: [T; 3],
    pub semantic_logits: Vec<T>,
    /// Slot 0 is stuff; slot `k` is instance `k`.
    pub instance_logits: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Thing {
    pub track: ObjectTrack,
    pub field: Field,
}

/// The full panoptic-radiance field.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneModel {
    pub stuff: Field,
    pub things: Vec<Thing>,
    pub class_table: Vec<String>,
    pub bounds: Aabb,
    pub background: [f32; 3],
    /// Label given to rays that hit nothing.
    pub background_class: usize,
}

impl SceneModel {
    pub fn new(
        stuff: Field,
        things: Vec<Thing>,
        class_table: Vec<String>,
        bounds: Aabb,
        background: [f32; 3],
        background_class: usize,
    ) -> Result<Self> {
        let scene = Self {
            stuff,
            things,
            class_table,
            bounds,
            background,
            background_class,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stuff.role != FieldRole::Stuff {
            return Err(Error::RoleMismatch {
                expected: "stuff",
                found: self.stuff.role.name(),
            });
        }
        if self.stuff.config.num_classes != self.class_table.len() {
            return Err(Error::InvalidConfig(
                "stuff semantic head does not match the class table".into(),
            ));
        }
        if self.background_class >= self.class_table.len() {
            return Err(Error::InvalidConfig("background class out of range".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.things {
            if t.track.instance_id == 0 || !seen.insert(t.track.instance_id) {
                return Err(Error::InvalidConfig(format!(
                    "instance id {} is zero or repeated",
                    t.track.instance_id
                )));
            }
            if t.track.category >= self.class_table.len() {
                return Err(Error::InvalidConfig(format!(
                    "category {} of instance {} is not in the class table",
                    t.track.category, t.track.instance_id
                )));
            }
            if t.field.role != FieldRole::Thing {
                return Err(Error::RoleMismatch {
                    expected: "thing",
                    found: t.field.role.name(),
                });
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_table.len()
    }

    /// Length of instance vectors: one stuff slot plus ids up to the largest
    /// live instance id.
    pub fn instance_slots(&self) -> usize {
        self.things
            .iter()
            .map(|t| t.track.instance_id as usize)
            .max()
            .unwrap_or(0)
            + 1
    }

    pub fn thing_index(&self, instance_id: u32) -> Option<usize> {
        self.things.iter().position(|t| t.track.instance_id == instance_id)
    }

    pub fn thing(&self, instance_id: u32) -> Result<&Thing> {
        self.thing_index(instance_id)
            .map(|i| &self.things[i])
            .ok_or(Error::UnknownInstance(instance_id))
    }

    pub fn thing_mut(&mut self, instance_id: u32) -> Result<&mut Thing> {
        let i = self
            .thing_index(instance_id)
            .ok_or(Error::UnknownInstance(instance_id))?;
        Ok(&mut self.things[i])
    }

    /// Parameter blocks in tape order: stuff, each thing field, each track.
    pub fn params<T: Real>(&self) -> SceneParams<T> {
        let cast = |f: &Field| f.params.values().iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
        let mut blocks = vec![cast(&self.stuff)];
        blocks.extend(self.things.iter().map(|t| cast(&t.field)));
        blocks.extend(self.things.iter().map(|t| t.track.pack()));
        SceneParams {
            blocks,
            num_things: self.things.len(),
        }
    }

    /// Composited sample at a single world point.
    pub fn compose(&self, x: [f64; 3], d: [f64; 3], time: f64, alphas: Alphas) -> Result<PanopticSample> {
        Ok(self.compose_batch(&[x], &[d], &[time], alphas)?.remove(0))
    }

    pub fn compose_batch(
        &self,
        points: &[[f64; 3]],
        dirs: &[[f64; 3]],
        times: &[f64],
        alphas: Alphas,
    ) -> Result<Vec<PanopticSample>> {
        self.compose_batch_in::<f32>(points, dirs, times, alphas)
    }

    /// Batch composition with parameters and arithmetic in precision `T`.
    pub fn compose_batch_in<T: Real>(
        &self,
        points: &[[f64; 3]],
        dirs: &[[f64; 3]],
        times: &[f64],
        alphas: Alphas,
    ) -> Result<Vec<PanopticSample<T>>> {
        let params = self.params::<T>();
        let mut tape = Tape::new(params.block_refs());
        let cast = |v: &[[f64; 3]]| v.iter().map(|p| p.map(T::from_f64_lossy)).collect::<Vec<_>>();
        let batch = PointBatch {
            world: cast(points),
            dirs: cast(dirs),
            times: times.to_vec(),
        };
        let nodes = record_points(&mut tape, self, &params, &batch, alphas)?;
        let c = self.num_classes();
        let k = self.instance_slots();
        let density = &tape.value(nodes.density).data;
        let color = &tape.value(nodes.color).data;
        let sem = &tape.value(nodes.semantic).data;
        let inst = &tape.value(nodes.instance).data;
        Ok((0..points.len())
            .map(|i| PanopticSample {
                density: density[i],
                color: [color[3 * i], color[3 * i + 1], color[3 * i + 2]],
                semantic_logits: sem[i * c..(i + 1) * c].to_vec(),
                instance_logits: inst[i * k..(i + 1) * k].to_vec(),
            })
            .collect())
    }

    /// SHA-256 over the scene's description and every parameter value.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.class_table.join("\u{1f}").as_bytes());
        for v in self.bounds.min.iter().chain(&self.bounds.max) {
            h.update(v.to_le_bytes());
        }
        for v in self.background {
            h.update(v.to_le_bytes());
        }
        h.update((self.background_class as u64).to_le_bytes());
        hash_field(&mut h, &self.stuff);
        for t in &self.things {
            h.update(t.track.instance_id.to_le_bytes());
            h.update((t.track.category as u64).to_le_bytes());
            for e in t.track.extent {
                h.update(e.to_le_bytes());
            }
            for k in &t.track.keyframes {
                h.update(k.time.to_le_bytes());
                for v in k.rotation.iter().chain(k.translation.iter()) {
                    h.update(v.to_le_bytes());
                }
            }
            hash_field(&mut h, &t.field);
        }
        hex(&h.finalize())
    }
}

/// SHA-256 over a field's role, seed and parameters.
pub fn field_hash(f: &Field) -> String {
    let mut h = Sha256::new();
    hash_field(&mut h, f);
    hex(&h.finalize())
}

pub(crate) fn hash_field(h: &mut Sha256, f: &Field) {
    h.update(f.role.name().as_bytes());
    h.update(f.seed.to_le_bytes());
    for v in f.params.values() {
        h.update(v.to_le_bytes());
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Owned parameter blocks of a scene, in any precision.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams<T> {
    pub blocks: Vec<Vec<T>>,
    num_things: usize,
}

impl<T: Real> SceneParams<T> {
    pub fn block_refs(&self) -> Vec<&[T]> {
        self.blocks.iter().map(|b| b.as_slice()).collect()
    }

    pub const STUFF_BLOCK: usize = 0;

    pub fn thing_block(&self, i: usize) -> usize {
        1 + i
    }

    pub fn track_block(&self, i: usize) -> usize {
        1 + self.num_things + i
    }

    pub fn num_things(&self) -> usize {
        self.num_things
    }
}

/// World-space query points with their view directions and timestamps.
#[derive(Clone, Debug, Default)]
pub struct PointBatch<T> {
    pub world: Vec<[T; 3]>,
    pub dirs: Vec<[T; 3]>,
    pub times: Vec<f64>,
}

impl<T> PointBatch<T> {
    pub fn len(&self) -> usize {
        self.world.len()
    }

    pub fn is_empty(&self) -> bool {
        self.world.is_empty()
    }
}

/// Per-point panoptic outputs on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PointNodes {
    /// `n x 1`
    pub density: NodeId,
    /// `n x 3`
    pub color: NodeId,
    /// `n x num_classes`
    pub semantic: NodeId,
    /// `n x instance_slots`
    pub instance: NodeId,
}

/// Records the composed panoptic field over a batch of points.
///
/// Box membership is decided on the current pose values; gradients reach
/// the thing fields, the stuff field and every keyframe pose that placed a
/// box around at least one point.
pub fn record_points<'p, T: Real>(
    tape: &mut Tape<'p, T>,
    scene: &SceneModel,
    params: &SceneParams<T>,
    batch: &PointBatch<T>,
    alphas: Alphas,
) -> Result<PointNodes> {
    let n = batch.len();
    if batch.dirs.len() != n || batch.times.len() != n {
        return Err(Error::DimensionMismatch("point batch".into()));
    }
    let classes = scene.num_classes();
    let slots = scene.instance_slots();
    let mut covered = vec![false; n];

    let mut density_parts = Vec::new();
    let mut color_parts = Vec::new();
    let mut sem_parts = Vec::new();
    let mut inst_parts = Vec::new();

    for (ti, thing) in scene.things.iter().enumerate() {
        let track = &thing.track;
        let block = params.thing_block(ti);
        let track_block = params.track_block(ti);
        let half = track.extent();
        let inv_half: [T; 3] = std::array::from_fn(|i| T::from_f64_lossy(2.0 / half[i]));

        let mut by_time: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, &t) in batch.times.iter().enumerate() {
            by_time.entry(t.to_bits()).or_default().push(i);
        }

        let mut local_parts = Vec::new();
        let mut dir_parts = Vec::new();
        let mut members: Vec<usize> = Vec::new();
        for (bits, idx) in by_time {
            let time = f64::from_bits(bits);
            let (a, b, w) = track.bracket(time);
            let kf = |k: usize| ParamRef {
                block: track_block,
                offset: k * KEYFRAME_PARAMS,
                rows: 1,
                cols: KEYFRAME_PARAMS,
            };
            let pose = tape.pose_interp(kf(a), kf(b), w)?;
            let p = tape.value(pose).data.clone();
            let inside: Vec<usize> = idx
                .into_iter()
                .filter(|&i| {
                    let x = batch.world[i];
                    let d = [x[0] - p[9], x[1] - p[10], x[2] - p[11]];
                    (0..3).all(|a| {
                        let v = (p[a] * d[0] + p[3 + a] * d[1] + p[6 + a] * d[2]) * inv_half[a];
                        v.abs() <= T::one()
                    })
                })
                .collect();
            if inside.is_empty() {
                continue;
            }
            let world: Vec<T> = inside.iter().flat_map(|&i| batch.world[i]).collect();
            let dirs: Vec<T> = inside.iter().flat_map(|&i| batch.dirs[i]).collect();
            let start = members.len();
            members.extend(&inside);
            let rows: Vec<usize> = (start..members.len()).collect();
            local_parts.push((tape.to_box(pose, world, inv_half)?, rows.clone()));
            dir_parts.push((tape.dir_to_box(pose, dirs)?, rows));
        }
        if members.is_empty() {
            continue;
        }
        for &i in &members {
            covered[i] = true;
        }
        let m = members.len();
        let x_local = tape.scatter_add(m, 3, local_parts)?;
        let d_local = tape.scatter_add(m, 3, dir_parts)?;
        let refs = thing.field.refs(block)?;
        let (ax, ad) = alphas.for_field::<T>(&thing.field);
        let out = build_field(tape, &thing.field.config, &refs, x_local, d_local, ax, ad)?;
        let sem = tape.one_hot_scaled(out.density, track.category, classes)?;
        let inst = tape.one_hot_scaled(out.density, track.instance_id as usize, slots)?;
        density_parts.push((out.density, members.clone()));
        color_parts.push((out.color, members.clone()));
        sem_parts.push((sem, members.clone()));
        inst_parts.push((inst, members));
    }

    let stuff_idx: Vec<usize> = (0..n).filter(|&i| !covered[i]).collect();
    if !stuff_idx.is_empty() {
        let m = stuff_idx.len();
        let mut xs = Vec::with_capacity(3 * m);
        let mut ds = Vec::with_capacity(3 * m);
        for &i in &stuff_idx {
            let x = batch.world[i].map(|v| v.as_f64());
            xs.extend(scene.bounds.normalize(x).map(T::from_f64_lossy));
            ds.extend(batch.dirs[i]);
        }
        let x = tape.input(Mat::from_vec(m, 3, xs)?)?;
        let d = tape.input(Mat::from_vec(m, 3, ds)?)?;
        let refs = scene.stuff.refs(SceneParams::<T>::STUFF_BLOCK)?;
        let (ax, ad) = alphas.for_field::<T>(&scene.stuff);
        let out = build_field(tape, &scene.stuff.config, &refs, x, d, ax, ad)?;
        let mut one_hot = Mat::zeros(m, slots);
        for r in 0..m {
            one_hot.data[r * slots] = T::one();
        }
        let inst = tape.input(one_hot)?;
        density_parts.push((out.density, stuff_idx.clone()));
        color_parts.push((out.color, stuff_idx.clone()));
        sem_parts.push((out.semantic.expect("stuff has a semantic head"), stuff_idx.clone()));
        inst_parts.push((inst, stuff_idx));
    }

    Ok(PointNodes {
        density: tape.scatter_add(n, 1, density_parts)?,
        color: tape.scatter_add(n, 3, color_parts)?,
        semantic: tape.scatter_add(n, classes, sem_parts)?,
        instance: tape.scatter_add(n, slots, inst_parts)?,
    })
}
