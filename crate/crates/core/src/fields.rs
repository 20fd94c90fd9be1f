//! Stuff and thing coordinate networks.
//!
//! Both roles share one architecture: a ReLU trunk over the windowed
//! positional encoding of the query point (with the encoding concatenated
//! back in at the middle layer), a softplus density head and, for stuff, a
//! direction-independent semantic head. Color goes through a feature layer,
//! is concatenated with the encoded view direction and squashed by a sigmoid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Mat, NodeId, ParamRef, ParamVector, Real, Tape};
use crate::{Error, Result};

/// Density-head bias for a freshly initialized stuff field (mostly empty).
pub const STUFF_DENSITY_BIAS: f32 = -5.0;
/// Density-head bias for a freshly initialized thing field (mostly full).
pub const THING_DENSITY_BIAS: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub hidden_layers: usize,
    pub width: usize,
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    pub has_semantic_head: bool,
    pub num_classes: usize,
}

impl FieldConfig {
    /// Stuff network at full size: 8 x 256, 10 position bands.
    pub fn stuff_full(num_classes: usize) -> Self {
        Self {
            hidden_layers: 8,
            width: 256,
            pos_freqs: 10,
            dir_freqs: 2,
            has_semantic_head: true,
            num_classes,
        }
    }

    /// Thing network at full size: 4 x 128, 6 position bands.
    pub fn thing_full() -> Self {
        Self {
            hidden_layers: 4,
            width: 128,
            pos_freqs: 6,
            dir_freqs: 2,
            has_semantic_head: false,
            num_classes: 0,
        }
    }

    pub fn stuff_toy(num_classes: usize) -> Self {
        Self {
            hidden_layers: 4,
            width: 64,
            ..Self::stuff_full(num_classes)
        }
    }

    pub fn thing_toy() -> Self {
        Self {
            hidden_layers: 3,
            width: 32,
            ..Self::thing_full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.width == 0 || self.pos_freqs == 0 {
            return Err(Error::InvalidConfig(
                "hidden_layers, width and pos_freqs must be at least 1".into(),
            ));
        }
        if self.has_semantic_head && self.num_classes < 2 {
            return Err(Error::InvalidConfig(
                "a semantic head needs at least two classes".into(),
            ));
        }
        // Bands beyond this overflow the doubling frequency in f32.
        if self.pos_freqs > 24 || self.dir_freqs > 24 {
            return Err(Error::InvalidConfig("too many encoding bands".into()));
        }
        Ok(())
    }

    pub fn pos_dim(&self) -> usize {
        3 + 6 * self.pos_freqs
    }

    pub fn dir_dim(&self) -> usize {
        3 + 6 * self.dir_freqs
    }

    /// Hidden layer that receives the encoded position again.
    pub fn skip_layer(&self) -> Option<usize> {
        (self.hidden_layers >= 2).then_some(self.hidden_layers / 2)
    }

    pub fn color_width(&self) -> usize {
        (self.width / 2).max(1)
    }

    /// Parameter layout as `(name, shape)`; weights are `[in, out]`.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let w = self.width;
        let mut out = Vec::new();
        for i in 0..self.hidden_layers {
            let fan_in = if i == 0 {
                self.pos_dim()
            } else if Some(i) == self.skip_layer() {
                w + self.pos_dim()
            } else {
                w
            };
            out.push((format!("layer{i}.w"), vec![fan_in, w]));
            out.push((format!("layer{i}.b"), vec![w]));
        }
        out.push(("density.w".into(), vec![w, 1]));
        out.push(("density.b".into(), vec![1]));
        if self.has_semantic_head {
            out.push(("semantic.w".into(), vec![w, self.num_classes]));
            out.push(("semantic.b".into(), vec![self.num_classes]));
        }
        out.push(("feature.w".into(), vec![w, w]));
        out.push(("feature.b".into(), vec![w]));
        out.push(("color_hidden.w".into(), vec![w + self.dir_dim(), self.color_width()]));
        out.push(("color_hidden.b".into(), vec![self.color_width()]));
        out.push(("color_out.w".into(), vec![self.color_width(), 3]));
        out.push(("color_out.b".into(), vec![3]));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldRole {
    Stuff,
    Thing,
}

impl FieldRole {
    pub fn name(self) -> &'static str {
        match self {
            FieldRole::Stuff => "stuff",
            FieldRole::Thing => "thing",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub config: FieldConfig,
    pub role: FieldRole,
    pub seed: u64,
    pub params: ParamVector,
}

/// Tape references to every parameter segment of one field.
#[derive(Clone, Debug)]
pub struct FieldRefs {
    layers: Vec<(ParamRef, ParamRef)>,
    density: (ParamRef, ParamRef),
    semantic: Option<(ParamRef, ParamRef)>,
    feature: (ParamRef, ParamRef),
    color_hidden: (ParamRef, ParamRef),
    color_out: (ParamRef, ParamRef),
}

/// Output nodes of a field evaluated on a batch of points.
#[derive(Clone, Copy, Debug)]
pub struct FieldNodes {
    /// `n x 1`, non-negative.
    pub density: NodeId,
    /// `n x 3` in `[0, 1]`.
    pub color: NodeId,
    /// `n x num_classes` logits, stuff only.
    pub semantic: Option<NodeId>,
}

/// Values of one field query.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample<T = f32> {
    pub density: T,
    pub color: [T; 3],
    pub semantic_logits: Vec<T>,
}

impl Field {
    /// Checks that `params` has exactly the layout `config` implies.
    pub fn from_parts(
        config: FieldConfig,
        role: FieldRole,
        seed: u64,
        params: ParamVector,
    ) -> Result<Self> {
        config.validate()?;
        if params.layout_spec() != config.layout() {
            return Err(Error::InvalidConfig(
                "parameter layout does not match field config".into(),
            ));
        }
        if role == FieldRole::Stuff && !config.has_semantic_head {
            return Err(Error::InvalidConfig("stuff fields need a semantic head".into()));
        }
        Ok(Self {
            config,
            role,
            seed,
            params,
        })
    }

    pub fn refs(&self, block: usize) -> Result<FieldRefs> {
        let pair = |name: &str| -> Result<(ParamRef, ParamRef)> {
            Ok((
                self.params.param_ref(block, &format!("{name}.w"))?,
                self.params.param_ref(block, &format!("{name}.b"))?,
            ))
        };
        Ok(FieldRefs {
            layers: (0..self.config.hidden_layers)
                .map(|i| pair(&format!("layer{i}")))
                .collect::<Result<_>>()?,
            density: pair("density")?,
            semantic: if self.config.has_semantic_head {
                Some(pair("semantic")?)
            } else {
                None
            },
            feature: pair("feature")?,
            color_hidden: pair("color_hidden")?,
            color_out: pair("color_out")?,
        })
    }

    fn expect_role(&self, role: FieldRole) -> Result<()> {
        if self.role != role {
            return Err(Error::RoleMismatch {
                expected: role.name(),
                found: self.role.name(),
            });
        }
        Ok(())
    }

    /// Evaluates the field on a batch of points (coordinates already in the
    /// field's input domain) with a throwaway `f32` tape.
    pub fn eval_batch(
        &self,
        points: &[[f32; 3]],
        dirs: &[[f32; 3]],
        alpha_x: f32,
        alpha_d: f32,
    ) -> Result<Vec<FieldSample>> {
        self.eval_batch_in(points, dirs, alpha_x, alpha_d)
    }

    /// Batch evaluation in precision `T`.
    pub fn eval_batch_in<T: Real>(
        &self,
        points: &[[T; 3]],
        dirs: &[[T; 3]],
        alpha_x: T,
        alpha_d: T,
    ) -> Result<Vec<FieldSample<T>>> {
        if points.len() != dirs.len() {
            return Err(Error::DimensionMismatch("points vs directions".into()));
        }
        let n = points.len();
        let refs = self.refs(0)?;
        let params: Vec<T> = self.params.values().iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
        let mut tape = Tape::new(vec![&params[..]]);
        let x = tape.input(Mat::from_vec(n, 3, points.concat())?)?;
        let d = tape.input(Mat::from_vec(n, 3, dirs.concat())?)?;
        let out = build_field(&mut tape, &self.config, &refs, x, d, alpha_x, alpha_d)?;
        let density = &tape.value(out.density).data;
        let color = &tape.value(out.color).data;
        let c = self.config.num_classes;
        Ok((0..n)
            .map(|i| FieldSample {
                density: density[i],
                color: [color[3 * i], color[3 * i + 1], color[3 * i + 2]],
                semantic_logits: out
                    .semantic
                    .map(|s| tape.value(s).data[i * c..(i + 1) * c].to_vec())
                    .unwrap_or_default(),
            })
            .collect())
    }

    /// Stuff query at `x` (scene-normalized coordinates) looking along `d`.
    pub fn eval_stuff(
        &self,
        x: [f32; 3],
        d: [f32; 3],
        alpha_x: f32,
        alpha_d: f32,
    ) -> Result<FieldSample> {
        self.expect_role(FieldRole::Stuff)?;
        check_unit(d)?;
        Ok(self.eval_batch(&[x], &[d], alpha_x, alpha_d)?.remove(0))
    }

    /// Thing query at `x_local` in the unit box frame.
    pub fn eval_thing(
        &self,
        x_local: [f32; 3],
        d_local: [f32; 3],
        alpha_x: f32,
        alpha_d: f32,
    ) -> Result<FieldSample> {
        self.expect_role(FieldRole::Thing)?;
        check_unit(d_local)?;
        Ok(self.eval_batch(&[x_local], &[d_local], alpha_x, alpha_d)?.remove(0))
    }
}

fn check_unit(d: [f32; 3]) -> Result<()> {
    let n = (d[0] as f64).hypot(d[1] as f64).hypot(d[2] as f64);
    // f32 inputs cannot be normalized tighter than a few ulps.
    if (n - 1.0).abs() > 1e-5 {
        return Err(Error::InvalidConfig(format!("direction norm {n} is not 1")));
    }
    Ok(())
}

/// Records a field over `x` (`n x 3`) and `d` (`n x 3`) on `tape`.
pub fn build_field<T: Real>(
    tape: &mut Tape<'_, T>,
    config: &FieldConfig,
    refs: &FieldRefs,
    x: NodeId,
    d: NodeId,
    alpha_x: T,
    alpha_d: T,
) -> Result<FieldNodes> {
    let enc_x = tape.encode(x, config.pos_freqs, alpha_x)?;
    let enc_d = tape.encode(d, config.dir_freqs, alpha_d)?;
    let mut h = enc_x;
    for (i, (w, b)) in refs.layers.iter().enumerate() {
        if Some(i) == config.skip_layer() {
            h = tape.concat(h, enc_x)?;
        }
        let z = tape.linear(h, *w, *b)?;
        h = tape.relu(z)?;
    }
    let pre_density = tape.linear(h, refs.density.0, refs.density.1)?;
    let density = tape.softplus(pre_density)?;
    let semantic = match &refs.semantic {
        Some((w, b)) => Some(tape.linear(h, *w, *b)?),
        None => None,
    };
    let feature = tape.linear(h, refs.feature.0, refs.feature.1)?;
    let joined = tape.concat(feature, enc_d)?;
    let hidden = tape.linear(joined, refs.color_hidden.0, refs.color_hidden.1)?;
    let hidden = tape.relu(hidden)?;
    let raw = tape.linear(hidden, refs.color_out.0, refs.color_out.1)?;
    let color = tape.sigmoid(raw)?;
    Ok(FieldNodes {
        density,
        color,
        semantic,
    })
}

/// Glorot-uniform weights, zero biases, and the role's density-head bias.
pub fn init_biased(config: FieldConfig, role: FieldRole, seed: u64) -> Result<Field> {
    config.validate()?;
    let mut params = ParamVector::zeros(&config.layout())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segments = params.layout().to_vec();
    for seg in segments {
        if seg.name.ends_with(".w") {
            let (fan_in, fan_out) = (seg.shape[0] as f64, seg.shape[1] as f64);
            let limit = (6.0 / (fan_in + fan_out)).sqrt() as f32;
            for v in &mut params.values_mut()[seg.range()] {
                *v = rng.random_range(-limit..=limit);
            }
        }
    }
    let bias = match role {
        FieldRole::Stuff => STUFF_DENSITY_BIAS,
        FieldRole::Thing => THING_DENSITY_BIAS,
    };
    params
        .slice_mut("density.b")
        .expect("density head present")
        .fill(bias);
    Field::from_parts(config, role, seed, params)
}

/// Windowed positional encoding of a single point; same layout as the tape
/// op: raw `x`, then per band `j` the three sines and three cosines of
/// `2^j pi x`, all scaled by the band's window.
pub fn encode(x: [f64; 3], num_freqs: usize, alpha: f64) -> Vec<f64> {
    let weights = crate::diffmath::band_weights::<f64>(num_freqs, alpha);
    let mut out = Vec::with_capacity(3 + 6 * num_freqs);
    out.extend_from_slice(&x);
    for (j, w) in weights.iter().enumerate() {
        let freq = (1u64 << j) as f64 * std::f64::consts::PI;
        for c in x {
            out.push(w * (freq * c).sin());
        }
        for c in x {
            out.push(w * (freq * c).cos());
        }
    }
    out
}

/// Window weight of band `j` at `alpha`.
pub fn band_weight(j: usize, alpha: f64) -> f64 {
    let x = (alpha - j as f64).clamp(0.0, 1.0);
    0.5 * (1.0 - (std::f64::consts::PI * x).cos())
}

/// Coarse-to-fine frequency schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingSchedule {
    pub total_steps: usize,
    pub warmup_fraction: f64,
}

impl EncodingSchedule {
    pub fn new(total_steps: usize, warmup_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&warmup_fraction) {
            return Err(Error::InvalidConfig(format!(
                "warmup fraction {warmup_fraction} outside [0, 1]"
            )));
        }
        Ok(Self {
            total_steps,
            warmup_fraction,
        })
    }

    /// All bands active from the first step.
    pub fn disabled() -> Self {
        Self {
            total_steps: 0,
            warmup_fraction: 0.0,
        }
    }
}

/// Linear ramp of the active band count from 0 to `num_freqs` over the
/// warmup, constant afterwards.
pub fn alpha_at(schedule: &EncodingSchedule, step: usize, num_freqs: usize) -> f64 {
    let warmup = schedule.warmup_fraction * schedule.total_steps as f64;
    if warmup <= 0.0 || step as f64 >= warmup {
        return num_freqs as f64;
    }
    num_freqs as f64 * step as f64 / warmup
}
