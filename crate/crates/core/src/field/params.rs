use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{MapError, Result};

/// Which part of the model a parameter range belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmentKind {
    Grid { level: usize },
    GeometryDecoder,
    ColorDecoder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    #[serde(flatten)]
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Partition of the flat parameter vector into grid levels and decoder
/// tensors. Grid segments always come first, so the grid partition is the
/// prefix `0..grid_len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    total_len: usize,
    grid_len: usize,
}

impl ParamLayout {
    /// Builds a layout from segments given in storage order.
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let mut cursor = 0;
        let mut grid_len = 0;
        let mut seen_decoder = false;
        for seg in &segments {
            if seg.start != cursor {
                return Err(MapError::Config(format!(
                    "segment {} starts at {} but previous segments end at {cursor}",
                    seg.name, seg.start
                )));
            }
            match seg.kind {
                SegmentKind::Grid { .. } => {
                    if seen_decoder {
                        return Err(MapError::Config(
                            "grid segments must precede decoder segments".into(),
                        ));
                    }
                    grid_len += seg.len;
                }
                _ => seen_decoder = true,
            }
            cursor += seg.len;
        }
        Ok(Self {
            segments,
            total_len: cursor,
            grid_len,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn grid_len(&self) -> usize {
        self.grid_len
    }

    pub fn grid_range(&self) -> Range<usize> {
        0..self.grid_len
    }

    pub fn decoder_range(&self) -> Range<usize> {
        self.grid_len..self.total_len
    }

    pub fn is_grid(&self, index: usize) -> bool {
        index < self.grid_len
    }
}

/// Flat vector of every learnable parameter, tied to its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<ParamLayout>,
}

impl ParamVector {
    pub fn new(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(MapError::Dimension(format!(
                "parameter vector has {} entries, layout expects {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let values = vec![0.0; layout.total_len()];
        Self { values, layout }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grid(&self) -> &[f64] {
        &self.values[self.layout.grid_range()]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Gradient of a scalar with respect to every entry of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().for_each(|g| *g *= k);
    }

    /// Index and value of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<(usize, f64)> {
        self.values
            .iter()
            .copied()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(name: &str, kind: SegmentKind, start: usize, len: usize) -> Segment {
        Segment {
            name: name.into(),
            kind,
            start,
            len,
        }
    }

    #[test]
    fn layout_ranges_cover_vector() {
        let layout = ParamLayout::new(vec![
            seg("grid0", SegmentKind::Grid { level: 0 }, 0, 8),
            seg("grid1", SegmentKind::Grid { level: 1 }, 8, 18),
            seg("geo", SegmentKind::GeometryDecoder, 26, 5),
            seg("col", SegmentKind::ColorDecoder, 31, 4),
        ])
        .unwrap();
        assert_eq!(layout.total_len(), 35);
        assert_eq!(layout.grid_range(), 0..26);
        assert_eq!(layout.decoder_range(), 26..35);
        let covered: usize = layout.segments().iter().map(|s| s.len).sum();
        assert_eq!(covered, 35);
    }

    #[test]
    fn layout_rejects_gaps_and_misordering() {
        assert!(ParamLayout::new(vec![seg("g", SegmentKind::Grid { level: 0 }, 1, 4)]).is_err());
        assert!(ParamLayout::new(vec![
            seg("geo", SegmentKind::GeometryDecoder, 0, 2),
            seg("g", SegmentKind::Grid { level: 0 }, 2, 4),
        ])
        .is_err());
    }

    #[test]
    fn vector_length_is_checked() {
        let layout = Arc::new(
            ParamLayout::new(vec![seg("g", SegmentKind::Grid { level: 0 }, 0, 4)]).unwrap(),
        );
        assert!(ParamVector::new(layout.clone(), vec![0.0; 3]).is_err());
        assert_eq!(ParamVector::zeros(layout).len(), 4);
    }
}
