//! Edit session: an immutable scene snapshot swapped atomically on every
//! edit, the edit log that produced it, and a render cache.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use panfield_core::edit::{apply, replay, EditOp};
use panfield_core::io::{save_scene, KeyframeEntry};
use panfield_core::renderer::{render_image, Camera, Intrinsics, RenderOptions};
use panfield_core::scene::{field_hash, Aabb, SceneModel};
use serde::{Deserialize, Serialize};

use crate::image::{encode, Channel, ImageFormat};
use crate::ServiceError;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub max_width: usize,
    pub max_height: usize,
    pub interactive_samples: usize,
    pub refine_samples: usize,
    /// Where `POST /save` writes when the request names no directory.
    pub save_dir: PathBuf,
    /// Static UI assets, served for every path not claimed by the API.
    pub static_dir: Option<PathBuf>,
    /// Allowed CORS origin; `None` allows any.
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_width: 320,
            max_height: 240,
            interactive_samples: 128,
            refine_samples: 512,
            save_dir: PathBuf::from("edited"),
            static_dir: None,
            cors_origin: None,
        }
    }
}

pub struct Snapshot {
    pub scene: SceneModel,
    pub hash: String,
}

impl Snapshot {
    fn new(scene: SceneModel) -> Self {
        let hash = scene.content_hash();
        Self { scene, hash }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThingSummary {
    pub id: u32,
    pub category: usize,
    pub class: String,
    pub extent: [f64; 3],
    pub field_hash: String,
    pub keyframes: Vec<KeyframeEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub hash: String,
    pub log_len: usize,
    pub classes: Vec<String>,
    pub bounds: Aabb,
    pub background_class: usize,
    pub cameras: usize,
    pub things: Vec<ThingSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditResponse {
    /// Position of the applied edit in the log.
    pub index: usize,
    pub scene: SceneSummary,
}

/// Where to look from: a stored camera or an orbit around the scene center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum View {
    Camera(usize),
    Orbit { azimuth_deg: f64, elevation_deg: f64, distance: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderParams {
    pub view: View,
    pub time: Option<f64>,
    pub width: usize,
    pub height: usize,
    pub channel: Channel,
    pub format: ImageFormat,
    pub refine: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct CacheKey {
    scene: String,
    view: [u64; 4],
    time: u64,
    size: (usize, usize),
    channel: Channel,
    format: ImageFormat,
    samples: usize,
}

pub struct Session {
    base: SceneModel,
    base_dir: PathBuf,
    cameras: Vec<Camera>,
    config: ServiceConfig,
    current: RwLock<Arc<Snapshot>>,
    log: Mutex<Vec<EditOp>>,
    cache: Mutex<HashMap<CacheKey, Arc<Vec<u8>>>>,
}

impl Session {
    /// `base_dir` resolves relative checkpoint paths of `add` edits.
    pub fn new(base: SceneModel, base_dir: PathBuf, cameras: Vec<Camera>, config: ServiceConfig) -> Self {
        let current = RwLock::new(Arc::new(Snapshot::new(base.clone())));
        Self {
            base,
            base_dir,
            cameras,
            config,
            current,
            log: Mutex::new(Vec::new()),
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().expect("snapshot lock").clone()
    }

    pub fn log(&self) -> Vec<EditOp> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn base(&self) -> &SceneModel {
        &self.base
    }

    pub fn summary(&self) -> SceneSummary {
        let log_len = self.log.lock().expect("log lock").len();
        self.summarize(&self.snapshot(), log_len)
    }

    fn summarize(&self, snap: &Snapshot, log_len: usize) -> SceneSummary {
        let scene = &snap.scene;
        SceneSummary {
            hash: snap.hash.clone(),
            log_len,
            classes: scene.class_table.clone(),
            bounds: scene.bounds,
            background_class: scene.background_class,
            cameras: self.cameras.len(),
            things: scene
                .things
                .iter()
                .map(|t| ThingSummary {
                    id: t.track.instance_id,
                    category: t.track.category,
                    class: scene.class_table.get(t.track.category).cloned().unwrap_or_default(),
                    extent: t.track.extent(),
                    field_hash: field_hash(&t.field),
                    keyframes: t.track.keyframes().iter().map(KeyframeEntry::from_keyframe).collect(),
                })
                .collect(),
        }
    }

    /// Applies one edit. Edits are serialized by the log lock; renders keep
    /// reading whichever snapshot they started with.
    pub fn edit(&self, op: EditOp) -> Result<EditResponse, ServiceError> {
        let mut log = self.log.lock().expect("log lock");
        let next = apply(&self.snapshot().scene, &op, &self.base_dir).map_err(ServiceError::Edit)?;
        log.push(op);
        let snap = self.install(next);
        Ok(EditResponse {
            index: log.len() - 1,
            scene: self.summarize(&snap, log.len()),
        })
    }

    /// Drops the last edit and rebuilds the scene from the shortened log.
    pub fn undo(&self) -> Result<SceneSummary, ServiceError> {
        let mut log = self.log.lock().expect("log lock");
        if log.pop().is_none() {
            return Err(ServiceError::NothingToUndo);
        }
        let scene = replay(&self.base, &log, &self.base_dir).map_err(ServiceError::Internal)?;
        let snap = self.install(scene);
        Ok(self.summarize(&snap, log.len()))
    }

    fn install(&self, scene: SceneModel) -> Arc<Snapshot> {
        let snap = Arc::new(Snapshot::new(scene));
        *self.current.write().expect("snapshot lock") = snap.clone();
        self.cache.lock().expect("cache lock").retain(|k, _| k.scene == snap.hash);
        snap
    }

    /// Writes the current scene and the edit log (`edits.json`) to `dir`.
    pub fn save(&self, dir: Option<&Path>) -> Result<PathBuf, ServiceError> {
        let log = self.log.lock().expect("log lock");
        let dir = dir.map(Path::to_path_buf).unwrap_or_else(|| self.config.save_dir.clone());
        let snap = self.snapshot();
        save_scene(&dir, &snap.scene).map_err(ServiceError::Internal)?;
        let json = serde_json::to_vec_pretty(&*log).map_err(|e| ServiceError::Io(e.to_string()))?;
        std::fs::write(dir.join(EDIT_LOG_FILE), json).map_err(|e| ServiceError::Io(e.to_string()))?;
        Ok(dir)
    }

    pub fn camera(&self, params: &RenderParams, bounds: &Aabb) -> Result<Camera, ServiceError> {
        let (w, h) = (params.width, params.height);
        if w == 0 || h == 0 || w > self.config.max_width || h > self.config.max_height {
            return Err(ServiceError::BadRequest(format!(
                "image size must be between 1x1 and {}x{}",
                self.config.max_width, self.config.max_height
            )));
        }
        match params.view {
            View::Camera(i) => {
                let c = self
                    .cameras
                    .get(i)
                    .ok_or_else(|| ServiceError::BadRequest(format!("camera index {i} out of range ({})", self.cameras.len())))?;
                Camera::new(c.intrinsics.resized(w, h), c.rotation, c.center, c.shutter_time)
                    .map_err(|e| ServiceError::BadRequest(e.to_string()))
            }
            View::Orbit {
                azimuth_deg,
                elevation_deg,
                distance,
            } => {
                if !(distance > 0.0) || !azimuth_deg.is_finite() || !elevation_deg.is_finite() {
                    return Err(ServiceError::BadRequest("orbit needs finite angles and a positive distance".into()));
                }
                let el = elevation_deg.clamp(-89.0, 89.0).to_radians();
                let az = azimuth_deg.to_radians();
                let c = bounds.center();
                let eye = [
                    c[0] + distance * el.cos() * az.cos(),
                    c[1] + distance * el.cos() * az.sin(),
                    c[2] + distance * el.sin(),
                ];
                let k = Intrinsics::from_fov(w, h, 60.0);
                Camera::look_at(k, eye, c, [0.0, 0.0, 1.0], 0.0).map_err(|e| ServiceError::BadRequest(e.to_string()))
            }
        }
    }

    /// Renders one channel of the current snapshot. Identical requests
    /// against the same scene state are served from the cache.
    pub fn render(&self, params: &RenderParams) -> Result<Arc<Vec<u8>>, ServiceError> {
        let snap = self.snapshot();
        let camera = self.camera(params, &snap.scene.bounds)?;
        let time = params.time.unwrap_or(camera.shutter_time);
        if !time.is_finite() {
            return Err(ServiceError::BadRequest("time must be finite".into()));
        }
        let samples = if params.refine {
            self.config.refine_samples
        } else {
            self.config.interactive_samples
        };
        let view = match params.view {
            View::Camera(i) => [0, i as u64, 0, 0],
            View::Orbit {
                azimuth_deg,
                elevation_deg,
                distance,
            } => [1, azimuth_deg.to_bits(), elevation_deg.to_bits(), distance.to_bits()],
        };
        let key = CacheKey {
            scene: snap.hash.clone(),
            view,
            time: time.to_bits(),
            size: (params.width, params.height),
            channel: params.channel,
            format: params.format,
            samples,
        };
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let opts = RenderOptions {
            samples,
            ..RenderOptions::default()
        };
        let img = render_image(&snap.scene, &camera, time, &opts).map_err(ServiceError::Internal)?;
        let bytes = Arc::new(encode(&img, params.channel, params.format).map_err(|e| ServiceError::Io(e.to_string()))?);
        let mut cache = self.cache.lock().expect("cache lock");
        if self.current.read().expect("snapshot lock").hash == snap.hash {
            cache.insert(key, bytes.clone());
        }
        Ok(bytes)
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }
}

pub const EDIT_LOG_FILE: &str = "edits.json";
