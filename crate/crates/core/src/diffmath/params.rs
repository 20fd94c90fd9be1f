use std::collections::HashSet;

use super::tape::ParamRef;
use crate::{Error, Result};

/// A named slice of a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat `f32` parameter storage with a named segment layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f32>,
    layout: Vec<Segment>,
}

impl ParamVector {
    /// Zero-filled vector for the given `(name, shape)` layout.
    pub fn zeros<S: AsRef<str>>(layout: &[(S, Vec<usize>)]) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut segments = Vec::with_capacity(layout.len());
        let mut offset = 0;
        for (name, shape) in layout {
            let name = name.as_ref();
            if !seen.insert(name.to_string()) {
                return Err(Error::InvalidConfig(format!("duplicate segment `{name}`")));
            }
            let segment = Segment {
                name: name.to_string(),
                shape: shape.clone(),
                offset,
            };
            offset += segment.len();
            segments.push(segment);
        }
        Ok(Self {
            values: vec![0.0; offset],
            layout: segments,
        })
    }

    /// Wraps existing values; the length must match the layout exactly.
    pub fn from_values<S: AsRef<str>>(
        layout: &[(S, Vec<usize>)],
        values: Vec<f32>,
    ) -> Result<Self> {
        let mut pv = Self::zeros(layout)?;
        if values.len() != pv.values.len() {
            return Err(Error::DimensionMismatch(format!(
                "layout needs {} values, got {}",
                pv.values.len(),
                values.len()
            )));
        }
        pv.values = values;
        Ok(pv)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    /// The layout as `(name, shape)` pairs, suitable for rebuilding.
    pub fn layout_spec(&self) -> Vec<(String, Vec<usize>)> {
        self.layout
            .iter()
            .map(|s| (s.name.clone(), s.shape.clone()))
            .collect()
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.layout.iter().find(|s| s.name == name)
    }

    pub fn slice(&self, name: &str) -> Option<&[f32]> {
        self.segment(name).map(|s| &self.values[s.range()])
    }

    pub fn slice_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        let range = self.segment(name)?.range();
        Some(&mut self.values[range])
    }

    /// Tape reference to a segment, viewing it as a matrix: 2-D shapes keep
    /// their dims, anything else is a single row.
    pub fn param_ref(&self, block: usize, name: &str) -> Result<ParamRef> {
        let seg = self
            .segment(name)
            .ok_or_else(|| Error::InvalidConfig(format!("no segment `{name}`")))?;
        let (rows, cols) = match seg.shape.as_slice() {
            [r, c] => (*r, *c),
            _ => (1, seg.len()),
        };
        Ok(ParamRef {
            block,
            offset: seg.offset,
            rows,
            cols,
        })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Same layout as `other`, names and shapes included.
    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }
}
