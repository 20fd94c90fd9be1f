//! Panoptic neural fields on the CPU.
//!
//! A scene is a "stuff" coordinate network for the static background plus
//! one small "thing" network per tracked object, each living inside a moving
//! oriented box. Fields are rendered with multi-channel volume rendering
//! (color, depth, semantics, instances) and fitted jointly with the object
//! tracks by analysis-by-synthesis.
//!
//! Module map:
//!
//! * [`diffmath`]: parameter vectors and the batched reverse-mode tape.
//! * [`fields`]: stuff/thing networks, positional encoding, initialization.
//! * [`scene`]: object tracks on SO(3), box transforms, field composition.
//! * [`renderer`]: ray sampling, compositing, image rendering.
//! * [`trainer`]: joint optimization of fields and tracks with Adam.
//! * [`metainit`]: federated-averaging meta initialization for thing fields.
//! * [`synth`]: analytic oracle scenes, dataset generation, metrics.
//! * [`edit`]: clone / set-pose / remove / add operations on trained scenes.
//! * [`io`]: checkpoints, scene description files, image formats.

pub mod diffmath;
pub mod edit;
mod error;
pub mod fields;
pub mod io;
pub mod metainit;
pub mod par;
pub mod renderer;
pub mod scene;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
