//! Tracks, boxes and batch shapes.

use serde::{Deserialize, Serialize};

use crate::error::{OmgError, Result};

/// Axis-aligned box in integer pixel coordinates, `[x, y, w, h]` with
/// `(x, y)` the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl BoundingBox {
    pub fn new(x: i64, y: i64, w: i64, h: i64) -> Result<Self> {
        if w <= 0 || h <= 0 {
            return Err(OmgError::InvalidBox(format!(
                "width and height must be positive, got [{x}, {y}, {w}, {h}]"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn right(&self) -> i64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> i64 {
        self.y + self.h
    }

    pub fn area(&self) -> i64 {
        self.w * self.h
    }

    /// Box center in continuous pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.w as f64 / 2.0,
            self.y as f64 + self.h as f64 / 2.0,
        )
    }

    /// Intersection with another box, `None` when the overlap is empty.
    pub fn intersect(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| BoundingBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    pub fn contains_point(&self, px: i64, py: i64) -> bool {
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }

    pub fn as_array(&self) -> [i64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Camera frame dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSize {
    pub width: u32,
    pub height: u32,
}

impl FrameSize {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(OmgError::InvalidTrack(format!(
                "frame size must be positive, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn rect(&self) -> BoundingBox {
        BoundingBox {
            x: 0,
            y: 0,
            w: self.width as i64,
            h: self.height as i64,
        }
    }
}

/// One observation of a track.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame_index: u32,
    pub bbox: BoundingBox,
}

/// A single-camera vehicle trajectory with its three descriptions.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    track_id: String,
    vehicle_class_id: usize,
    frames: Vec<FrameEntry>,
    frame_size: FrameSize,
    sentences: [String; 3],
}

impl Track {
    pub fn new(
        track_id: impl Into<String>,
        vehicle_class_id: usize,
        frames: Vec<FrameEntry>,
        frame_size: FrameSize,
        sentences: [String; 3],
    ) -> Result<Self> {
        let track_id = track_id.into();
        if frames.is_empty() {
            return Err(OmgError::EmptyTrajectory);
        }
        if let Some(pair) = frames
            .windows(2)
            .find(|pair| pair[1].frame_index <= pair[0].frame_index)
        {
            return Err(OmgError::InvalidTrack(format!(
                "track {track_id}: frame indices must be strictly increasing ({} then {})",
                pair[0].frame_index, pair[1].frame_index
            )));
        }
        Ok(Self {
            track_id,
            vehicle_class_id,
            frames,
            frame_size,
            sentences,
        })
    }

    pub fn id(&self) -> &str {
        &self.track_id
    }

    pub fn class_id(&self) -> usize {
        self.vehicle_class_id
    }

    pub fn frames(&self) -> &[FrameEntry] {
        &self.frames
    }

    pub fn frame_size(&self) -> FrameSize {
        self.frame_size
    }

    pub fn sentences(&self) -> &[String; 3] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    /// Always false: construction rejects empty trajectories.
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Shape of one training batch: `m` text-vehicle pairs, `n_text` textual and
/// `n_visual` visual granularities, embedding dimension `dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub m: usize,
    pub n_text: usize,
    pub n_visual: usize,
    pub dim: usize,
}

impl BatchConfig {
    pub const DEFAULT_N_TEXT: usize = 5;
    pub const DEFAULT_N_VISUAL: usize = 3;

    pub fn new(m: usize, n_text: usize, n_visual: usize, dim: usize) -> Result<Self> {
        if m == 0 || n_text == 0 || n_visual == 0 || dim == 0 {
            return Err(OmgError::InvalidArgument(format!(
                "batch config needs positive sizes, got M={m} N_t={n_text} N_v={n_visual} d={dim}"
            )));
        }
        Ok(Self {
            m,
            n_text,
            n_visual,
            dim,
        })
    }
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            m: 24,
            n_text: Self::DEFAULT_N_TEXT,
            n_visual: Self::DEFAULT_N_VISUAL,
            dim: 64,
        }
    }
}
