//! Scene edits: clone a thing's weights, move a keyframe, remove or add a
//! thing. Edits never touch the input scene; each returns a new one.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::io::{load_field, TrackEntry};
use crate::scene::{SceneModel, Thing};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EditOp {
    /// Copies the field, extent and category of `src` onto `dst`.
    Clone { src: u32, dst: u32 },
    /// Replaces or inserts the keyframe of `instance` at `time`. The
    /// rotation (row-major) is projected onto SO(3).
    SetPose {
        instance: u32,
        time: f64,
        rotation: [f64; 9],
        translation: [f64; 3],
    },
    Remove { instance: u32 },
    /// Adds a thing from a track description and a thing-field checkpoint
    /// path (relative paths resolve against the edit's base directory).
    Add { track: TrackEntry, checkpoint: String },
}

impl EditOp {
    /// Instances whose boxes the edit changes.
    pub fn touched(&self) -> Vec<u32> {
        match self {
            EditOp::Clone { dst, .. } => vec![*dst],
            EditOp::SetPose { instance, .. } | EditOp::Remove { instance } => vec![*instance],
            EditOp::Add { track, .. } => vec![track.instance],
        }
    }
}

/// Applies one edit, returning the edited copy.
pub fn apply(scene: &SceneModel, op: &EditOp, base: &Path) -> Result<SceneModel> {
    let mut next = scene.clone();
    match op {
        EditOp::Clone { src, dst } => {
            let source = scene.thing(*src)?.clone();
            let target = next.thing_mut(*dst)?;
            let mut track = crate::scene::ObjectTrack::new(
                *dst,
                source.track.category,
                source.track.extent(),
                target.track.keyframes().to_vec(),
            )?;
            std::mem::swap(&mut target.track, &mut track);
            target.field = source.field;
        }
        EditOp::SetPose {
            instance,
            time,
            rotation,
            translation,
        } => {
            if !time.is_finite() || rotation.iter().chain(translation).any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig("pose values must be finite".into()));
            }
            let r = Matrix3::from_row_slice(rotation);
            if r.determinant().abs() < 1e-9 {
                return Err(Error::InvalidConfig("rotation matrix is not invertible".into()));
            }
            next.thing_mut(*instance)?
                .track
                .set_pose(*time, &r, Vector3::from(*translation))?;
        }
        EditOp::Remove { instance } => {
            let i = next.thing_index(*instance).ok_or(Error::UnknownInstance(*instance))?;
            next.things.remove(i);
        }
        EditOp::Add { track, checkpoint } => {
            if next.thing_index(track.instance).is_some() {
                return Err(Error::InvalidConfig(format!("instance {} already exists", track.instance)));
            }
            let field = load_field(&base.join(checkpoint))?;
            next.things.push(Thing {
                track: track.to_track()?,
                field,
            });
        }
    }
    next.validate()?;
    Ok(next)
}

/// Applies edits in order.
pub fn replay(scene: &SceneModel, ops: &[EditOp], base: &Path) -> Result<SceneModel> {
    ops.iter().try_fold(scene.clone(), |s, op| apply(&s, op, base))
}

/// A render request inside an edit script.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderRequest {
    /// Index into the dataset cameras, or a camera path file.
    pub camera: CameraRef,
    pub time: Option<f64>,
    pub stem: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CameraRef {
    Index(usize),
    File(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScriptLine {
    Edit(EditOp),
    Render(RenderRequest),
}

/// Parses an edit script, one command per line:
///
/// ```text
/// clone <src> <dst>
/// set-pose <id> <time> "r00 r01 r02 r10 r11 r12 r20 r21 r22, tx ty tz"
/// remove <id>
/// add <track.toml> <checkpoint>
/// render <camera-index | camera-file> <stem> [time]
/// ```
///
/// Blank lines and `#` comments are skipped. Track files of `add` lines
/// resolve against `base`.
pub fn parse_script(text: &str, base: &Path) -> Result<Vec<ScriptLine>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::format("edit script", format!("line {}: {msg}", n + 1));
        let words = split_words(line).map_err(|m| bad(&m))?;
        let id = |s: &str| s.parse::<u32>().map_err(|_| bad(&format!("bad instance id {s:?}")));
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number {s:?}")));
        let arity = |k: usize| {
            if words.len() == k + 1 {
                Ok(())
            } else {
                Err(bad(&format!("`{}` takes {k} arguments", words[0])))
            }
        };
        let item = match words[0].as_str() {
            "clone" => {
                arity(2)?;
                ScriptLine::Edit(EditOp::Clone {
                    src: id(&words[1])?,
                    dst: id(&words[2])?,
                })
            }
            "set-pose" => {
                arity(3)?;
                let (r, t) = words[3].split_once(',').ok_or_else(|| bad("pose needs \"R, t\""))?;
                let r: Vec<f64> = r.split_whitespace().map(num).collect::<Result<_>>()?;
                let t: Vec<f64> = t.split_whitespace().map(num).collect::<Result<_>>()?;
                if r.len() != 9 || t.len() != 3 {
                    return Err(bad("pose needs 9 rotation and 3 translation values"));
                }
                ScriptLine::Edit(EditOp::SetPose {
                    instance: id(&words[1])?,
                    time: num(&words[2])?,
                    rotation: r.try_into().expect("nine values"),
                    translation: t.try_into().expect("three values"),
                })
            }
            "remove" => {
                arity(1)?;
                ScriptLine::Edit(EditOp::Remove { instance: id(&words[1])? })
            }
            "add" => {
                arity(2)?;
                let path = base.join(&words[1]);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path.clone(), e))?;
                let track: TrackEntry = toml::from_str(&text).map_err(|e| bad(&e.to_string()))?;
                ScriptLine::Edit(EditOp::Add {
                    track,
                    checkpoint: words[2].clone(),
                })
            }
            "render" => {
                if words.len() != 3 && words.len() != 4 {
                    return Err(bad("`render` takes a camera, a stem and an optional time"));
                }
                let camera = match words[1].parse::<usize>() {
                    Ok(i) => CameraRef::Index(i),
                    Err(_) => CameraRef::File(words[1].clone()),
                };
                ScriptLine::Render(RenderRequest {
                    camera,
                    stem: words[2].clone(),
                    time: words.get(3).map(|s| num(s)).transpose()?,
                })
            }
            other => return Err(bad(&format!("unknown command {other:?}"))),
        };
        out.push(item);
    }
    Ok(out)
}

fn split_words(line: &str) -> std::result::Result<Vec<String>, String> {
    let mut words = Vec::new();
    let mut rest = line.trim_start();
    while !rest.is_empty() {
        if let Some(body) = rest.strip_prefix('"') {
            let end = body.find('"').ok_or("unterminated quote")?;
            words.push(body[..end].to_string());
            rest = body[end + 1..].trim_start();
        } else {
            let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
            words.push(rest[..end].to_string());
            rest = rest[end..].trim_start();
        }
    }
    Ok(words)
}
