//! On-disk formats: field checkpoints, scene description files, dataset
//! directories and image encoders. `docs/formats.md` describes each layout.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::diffmath::ParamVector;
use crate::fields::{Field, FieldConfig, FieldRole};
use crate::renderer::{Camera, ChannelImages, Intrinsics};
use crate::scene::{Aabb, Keyframe, ObjectTrack, SceneModel, Thing};
use crate::synth::{Dataset, DatasetView};
use crate::{Error, Result};

pub const FIELD_MAGIC: &[u8; 8] = b"PNFIELD\0";
pub const FIELD_VERSION: u32 = 1;
pub const SCENE_FORMAT: &str = "panfield-scene";
pub const DATASET_FORMAT: &str = "panfield-dataset";
pub const TEXT_VERSION: u32 = 1;
/// Label value stored for ignored pixels in 8-bit label images.
pub const IGNORE_LABEL: u8 = 255;

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.what, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.what, "trailing bytes"));
        }
        Ok(())
    }
}

/// Serializes a field: magic, version, role, seed, config, then the
/// parameters as little-endian `f32`.
pub fn field_to_bytes(field: &Field) -> Vec<u8> {
    let c = &field.config;
    let mut out = Vec::with_capacity(64 + 4 * field.params.len());
    out.extend_from_slice(FIELD_MAGIC);
    out.extend_from_slice(&FIELD_VERSION.to_le_bytes());
    out.extend_from_slice(&(field.role as u32).to_le_bytes());
    out.extend_from_slice(&field.seed.to_le_bytes());
    for v in [c.hidden_layers, c.width, c.pos_freqs, c.dir_freqs, c.has_semantic_head as usize, c.num_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(field.params.len() as u64).to_le_bytes());
    for v in field.params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn field_from_bytes(bytes: &[u8]) -> Result<Field> {
    let mut r = Reader::new(bytes, "field checkpoint");
    if r.take(8)? != FIELD_MAGIC {
        return Err(Error::format("field checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != FIELD_VERSION {
        return Err(Error::format("field checkpoint", format!("unsupported version {version}")));
    }
    let role = match r.u32()? {
        0 => FieldRole::Stuff,
        1 => FieldRole::Thing,
        other => return Err(Error::format("field checkpoint", format!("unknown role {other}"))),
    };
    let seed = r.u64()?;
    let mut c = [0usize; 6];
    for v in &mut c {
        *v = r.u32()? as usize;
    }
    let config = FieldConfig {
        hidden_layers: c[0],
        width: c[1],
        pos_freqs: c[2],
        dir_freqs: c[3],
        has_semantic_head: match c[4] {
            0 => false,
            1 => true,
            _ => return Err(Error::format("field checkpoint", "bad semantic-head flag")),
        },
        num_classes: c[5],
    };
    config.validate()?;
    let count = r.u64()? as usize;
    let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::format("field checkpoint", "size overflow"))?)?;
    r.finish()?;
    let values = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let params = ParamVector::from_values(&config.layout(), values)?;
    Field::from_parts(config, role, seed, params)
}

pub fn save_field(path: &Path, field: &Field) -> Result<()> {
    write(path, &field_to_bytes(field))
}

pub fn load_field(path: &Path) -> Result<Field> {
    field_from_bytes(&read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeEntry {
    pub time: f64,
    /// Row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl KeyframeEntry {
    pub fn from_keyframe(k: &Keyframe) -> Self {
        let r = &k.rotation;
        Self {
            time: k.time,
            rotation: std::array::from_fn(|i| r[(i / 3, i % 3)]),
            translation: [k.translation[0], k.translation[1], k.translation[2]],
        }
    }

    pub fn to_keyframe(&self) -> Keyframe {
        Keyframe {
            time: self.time,
            rotation: Matrix3::from_row_slice(&self.rotation),
            translation: Vector3::from(self.translation),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackEntry {
    pub instance: u32,
    pub category: usize,
    pub extent: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub keyframes: Vec<KeyframeEntry>,
}

impl TrackEntry {
    pub fn from_track(track: &ObjectTrack, checkpoint: Option<String>) -> Self {
        Self {
            instance: track.instance_id,
            category: track.category,
            extent: track.extent(),
            checkpoint,
            keyframes: track.keyframes().iter().map(KeyframeEntry::from_keyframe).collect(),
        }
    }

    /// Builds the track. Stored rotations are projected onto SO(3); a
    /// description written by [`save_scene`] is already orthonormal to
    /// rounding, so projection leaves it unchanged up to that rounding.
    pub fn to_track(&self) -> Result<ObjectTrack> {
        ObjectTrack::new(
            self.instance,
            self.category,
            self.extent,
            self.keyframes.iter().map(KeyframeEntry::to_keyframe).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StuffEntry {
    pub checkpoint: String,
}

/// Text scene description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub format: String,
    pub version: u32,
    pub classes: Vec<String>,
    pub background: [f32; 3],
    pub background_class: usize,
    pub bounds: Aabb,
    pub stuff: StuffEntry,
    #[serde(default)]
    pub things: Vec<TrackEntry>,
}

pub fn thing_checkpoint_name(instance: u32) -> String {
    format!("fields/thing-{instance}.field")
}

pub const STUFF_CHECKPOINT: &str = "fields/stuff.field";
pub const SCENE_FILE: &str = "scene.toml";

pub fn scene_file(scene: &SceneModel) -> SceneFile {
    SceneFile {
        format: SCENE_FORMAT.into(),
        version: TEXT_VERSION,
        classes: scene.class_table.clone(),
        background: scene.background,
        background_class: scene.background_class,
        bounds: scene.bounds,
        stuff: StuffEntry {
            checkpoint: STUFF_CHECKPOINT.into(),
        },
        things: scene
            .things
            .iter()
            .map(|t| TrackEntry::from_track(&t.track, Some(thing_checkpoint_name(t.track.instance_id))))
            .collect(),
    }
}

/// Writes `scene.toml` and one checkpoint per field under `dir`.
pub fn save_scene(dir: &Path, scene: &SceneModel) -> Result<()> {
    let desc = scene_file(scene);
    let text = toml::to_string(&desc).map_err(|e| Error::format("scene file", e.to_string()))?;
    write(&dir.join(SCENE_FILE), text.as_bytes())?;
    save_field(&dir.join(STUFF_CHECKPOINT), &scene.stuff)?;
    for t in &scene.things {
        save_field(&dir.join(thing_checkpoint_name(t.track.instance_id)), &t.field)?;
    }
    Ok(())
}

/// Path of the description file for either a scene directory or the file
/// itself.
pub fn scene_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(SCENE_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn parse_scene_file(text: &str) -> Result<SceneFile> {
    let desc: SceneFile = toml::from_str(text).map_err(|e| Error::format("scene file", e.to_string()))?;
    if desc.format != SCENE_FORMAT || desc.version != TEXT_VERSION {
        return Err(Error::format(
            "scene file",
            format!("expected {SCENE_FORMAT} version {TEXT_VERSION}, found {} version {}", desc.format, desc.version),
        ));
    }
    Ok(desc)
}

/// Loads a scene from a directory or a `scene.toml` path; checkpoint paths
/// are relative to the description file.
pub fn load_scene(path: &Path) -> Result<SceneModel> {
    let file = scene_path(path);
    let text = String::from_utf8(read(&file)?).map_err(|e| Error::format("scene file", e.to_string()))?;
    let desc = parse_scene_file(&text)?;
    let base = file.parent().unwrap_or(Path::new("."));
    let stuff = load_field(&base.join(&desc.stuff.checkpoint))?;
    let things = desc
        .things
        .iter()
        .map(|e| {
            let ckpt = e
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::format("scene file", format!("thing {} has no checkpoint", e.instance)))?;
            Ok(Thing {
                track: e.to_track()?,
                field: load_field(&base.join(ckpt))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SceneModel::new(stuff, things, desc.classes, desc.bounds, desc.background, desc.background_class)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraEntry {
    pub intrinsics: Intrinsics,
    /// Camera-to-world rotation, row-major.
    pub rotation: [f64; 9],
    pub center: [f64; 3],
    pub time: f64,
}

impl CameraEntry {
    pub fn from_camera(c: &Camera) -> Self {
        Self {
            intrinsics: c.intrinsics,
            rotation: std::array::from_fn(|i| c.rotation[(i / 3, i % 3)]),
            center: [c.center[0], c.center[1], c.center[2]],
            time: c.shutter_time,
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        Camera::new(
            self.intrinsics,
            Matrix3::from_row_slice(&self.rotation),
            Vector3::from(self.center),
            self.time,
        )
    }
}

/// A list of cameras, e.g. a novel render path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPath {
    pub cameras: Vec<CameraEntry>,
}

pub const CAMERAS_FILE: &str = "cameras.toml";

pub fn save_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    let file = CameraPath {
        cameras: cameras.iter().map(CameraEntry::from_camera).collect(),
    };
    let text = toml::to_string(&file).map_err(|e| Error::format("camera file", e.to_string()))?;
    write(path, text.as_bytes())
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = String::from_utf8(read(path)?).map_err(|e| Error::format("camera file", e.to_string()))?;
    let file: CameraPath = toml::from_str(&text).map_err(|e| Error::format("camera file", e.to_string()))?;
    file.cameras.iter().map(CameraEntry::to_camera).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub split: String,
    pub stem: String,
    pub camera: CameraEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub seed: u64,
    pub flip_rate: f64,
    pub classes: Vec<String>,
    pub background: [f32; 3],
    pub background_class: usize,
    pub bounds: Aabb,
    #[serde(default)]
    pub tracks: Vec<TrackEntry>,
    pub views: Vec<ViewEntry>,
}

pub const DATASET_FILE: &str = "dataset.toml";

/// Writes a dataset directory. Refuses a non-empty `dir` unless `force`.
pub fn save_dataset(dir: &Path, data: &Dataset, force: bool) -> Result<()> {
    if !force && dir.exists() {
        let occupied = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if occupied {
            return Err(Error::InvalidConfig(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    let mut views = Vec::new();
    for (split, list) in [("train", &data.train), ("heldout", &data.heldout)] {
        for (i, v) in list.iter().enumerate() {
            let stem = format!("{split}-{i:03}");
            write_view(dir, &stem, v, data.class_table.len())?;
            views.push(ViewEntry {
                split: split.into(),
                stem,
                camera: CameraEntry::from_camera(&v.camera),
            });
        }
    }
    let desc = DatasetFile {
        format: DATASET_FORMAT.into(),
        version: TEXT_VERSION,
        name: data.name.clone(),
        seed: data.seed,
        flip_rate: data.flip_rate,
        classes: data.class_table.clone(),
        background: data.background,
        background_class: data.background_class,
        bounds: data.bounds,
        tracks: data.tracks.iter().map(|t| TrackEntry::from_track(t, None)).collect(),
        views,
    };
    let text = toml::to_string(&desc).map_err(|e| Error::format("dataset file", e.to_string()))?;
    write(&dir.join(DATASET_FILE), text.as_bytes())
}

fn write_view(dir: &Path, stem: &str, v: &DatasetView, classes: usize) -> Result<()> {
    let (w, h) = (v.gt.width, v.gt.height);
    let img = dir.join("images");
    let gt = dir.join("gt");
    write(&img.join(format!("{stem}.color.f32")), &f32_bytes(v.color.as_flattened()))?;
    write(&img.join(format!("{stem}.color.ppm")), &ppm(w, h, &v.color))?;
    let labels: Vec<u8> = v
        .labels
        .iter()
        .map(|l| l.map_or(IGNORE_LABEL, |c| c as u8))
        .collect();
    debug_assert!(classes < IGNORE_LABEL as usize);
    write(&img.join(format!("{stem}.labels.pgm")), &pgm8(w, h, &labels))?;
    write_channels(&gt, stem, &v.gt)
}

/// Channel files `<stem>.{color.ppm, depth.pgm, semantic.pgm, instance.pgm,
/// opacity.pgm}` plus raw float dumps `<stem>.{color,depth,opacity}.f32`.
pub fn write_channels(dir: &Path, stem: &str, img: &ChannelImages) -> Result<()> {
    let (w, h) = (img.width, img.height);
    write(&dir.join(format!("{stem}.color.ppm")), &ppm(w, h, &img.color))?;
    write(&dir.join(format!("{stem}.color.f32")), &f32_bytes(img.color.as_flattened()))?;
    let mm: Vec<u16> = img
        .depth
        .iter()
        .map(|&d| (d as f64 * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    write(&dir.join(format!("{stem}.depth.pgm")), &pgm16(w, h, &mm))?;
    write(&dir.join(format!("{stem}.depth.f32")), &f32_bytes(&img.depth))?;
    write(&dir.join(format!("{stem}.semantic.pgm")), &pgm8(w, h, &labels_u8(&img.semantic)))?;
    write(&dir.join(format!("{stem}.instance.pgm")), &pgm8(w, h, &labels_u8(&img.instance)))?;
    let op: Vec<u8> = img.opacity.iter().map(|&o| (o.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write(&dir.join(format!("{stem}.opacity.pgm")), &pgm8(w, h, &op))?;
    write(&dir.join(format!("{stem}.opacity.f32")), &f32_bytes(&img.opacity))
}

/// Reads channels written by [`write_channels`].
pub fn read_channels(dir: &Path, stem: &str, width: usize, height: usize) -> Result<ChannelImages> {
    let n = width * height;
    let color = read_f32(&dir.join(format!("{stem}.color.f32")), 3 * n)?;
    let (_, _, semantic) = parse_pgm8(&read(&dir.join(format!("{stem}.semantic.pgm")))?)?;
    let (_, _, instance) = parse_pgm8(&read(&dir.join(format!("{stem}.instance.pgm")))?)?;
    if semantic.len() != n || instance.len() != n {
        return Err(Error::format("label image", "size does not match the camera"));
    }
    Ok(ChannelImages {
        width,
        height,
        color: color.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        depth: read_f32(&dir.join(format!("{stem}.depth.f32")), n)?,
        semantic: semantic.into_iter().map(u32::from).collect(),
        instance: instance.into_iter().map(u32::from).collect(),
        opacity: read_f32(&dir.join(format!("{stem}.opacity.f32")), n)?,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(DATASET_FILE);
    let text = String::from_utf8(read(&path)?).map_err(|e| Error::format("dataset file", e.to_string()))?;
    let desc: DatasetFile = toml::from_str(&text).map_err(|e| Error::format("dataset file", e.to_string()))?;
    if desc.format != DATASET_FORMAT || desc.version != TEXT_VERSION {
        return Err(Error::format("dataset file", "unsupported format or version"));
    }
    let mut data = Dataset {
        name: desc.name,
        class_table: desc.classes,
        bounds: desc.bounds,
        background: desc.background,
        background_class: desc.background_class,
        tracks: desc.tracks.iter().map(TrackEntry::to_track).collect::<Result<_>>()?,
        seed: desc.seed,
        flip_rate: desc.flip_rate,
        train: Vec::new(),
        heldout: Vec::new(),
    };
    for v in desc.views {
        let camera = v.camera.to_camera()?;
        let (w, h) = (camera.width(), camera.height());
        let color = read_f32(&dir.join("images").join(format!("{}.color.f32", v.stem)), 3 * w * h)?;
        let (lw, lh, labels) = parse_pgm8(&read(&dir.join("images").join(format!("{}.labels.pgm", v.stem)))?)?;
        if (lw, lh) != (w, h) {
            return Err(Error::format("label image", format!("{} has the wrong size", v.stem)));
        }
        let view = DatasetView {
            time: camera.shutter_time,
            color: color.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            labels: labels
                .into_iter()
                .map(|l| (l != IGNORE_LABEL).then_some(l as u32))
                .collect(),
            gt: read_channels(&dir.join("gt"), &v.stem, w, h)?,
            camera,
        };
        match v.split.as_str() {
            "train" => data.train.push(view),
            "heldout" => data.heldout.push(view),
            other => return Err(Error::format("dataset file", format!("unknown split {other:?}"))),
        }
    }
    Ok(data)
}

pub fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = read(path)?;
    if bytes.len() != 4 * expected {
        return Err(Error::format(
            "float dump",
            format!("{} holds {} bytes, expected {}", path.display(), bytes.len(), 4 * expected),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect())
}

fn labels_u8(labels: &[u32]) -> Vec<u8> {
    labels.iter().map(|&l| l.min(254) as u8).collect()
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6), 8 bits per channel.
pub fn ppm(width: usize, height: usize, color: &[[f32; 3]]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(color.iter().flat_map(|c| c.map(to_u8)));
    out
}

/// Binary PGM (P5), 8 bits.
pub fn pgm8(width: usize, height: usize, values: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    out
}

/// Binary PGM (P5), 16 bits big-endian.
pub fn pgm16(width: usize, height: usize, values: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.extend(values.iter().flat_map(|v| v.to_be_bytes()));
    out
}

/// Parses an 8-bit binary PGM as written by [`pgm8`].
pub fn parse_pgm8(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("pgm", "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format("pgm", "bad header number"));
    if fields[0] != "P5" || num(&fields[3])? != 255 {
        return Err(Error::format("pgm", "expected an 8-bit P5 image"));
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() != w * h {
        return Err(Error::format("pgm", "pixel data length"));
    }
    Ok((w, h, data.to_vec()))
}

/// Distinct colors for label images; entry 0 is black.
pub fn label_color(label: u32) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 12] = [
        [0, 0, 0],
        [128, 64, 128],
        [70, 70, 70],
        [220, 220, 0],
        [0, 0, 142],
        [220, 20, 60],
        [107, 142, 35],
        [0, 130, 180],
        [250, 170, 30],
        [119, 11, 32],
        [152, 251, 152],
        [255, 255, 255],
    ];
    PALETTE[label as usize % PALETTE.len()]
}
