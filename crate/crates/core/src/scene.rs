//! Pixel sources for track frames.
//!
//! Real imagery is supplied as per-frame OMGT tensors; synthetic tracks carry
//! a small [`SceneSpec`] that renders any frame region analytically.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{OmgError, Result};
use crate::raster::Raster;
use crate::tensor_file::read_tensor;
use crate::track::{BoundingBox, FrameEntry, Track};

/// Anything that can produce the RGB pixels of a region of a track frame.
pub trait FrameSource: Sync {
    fn region(&self, track: &Track, frame: &FrameEntry, region: &BoundingBox) -> Result<Raster>;
}

/// One rendered vehicle: a solid color modulated by a 4x4 block pattern,
/// drawn at the track box shifted by `offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneVehicle {
    pub color: [f32; 3],
    /// Bit `by * 4 + bx` brightens block `(bx, by)`.
    pub pattern: u16,
    pub offset: [i64; 2],
}

/// Flat background plus vehicles painted in order (later on top), with
/// optional per-pixel noise that is a pure function of `seed`, frame,
/// channel and position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: f32,
    pub noise: f32,
    pub seed: u64,
    pub vehicles: Vec<SceneVehicle>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SceneVehicle {
    fn shade(&self, c: usize, u: i64, v: i64, w: i64, h: i64) -> f32 {
        let (bx, by) = (u * 4 / w, v * 4 / h);
        let lit = (self.pattern >> (by * 4 + bx)) & 1;
        self.color[c] * 0.75 + 0.1 + 0.15 * lit as f32
    }
}

impl SceneSpec {
    fn noise_at(&self, frame: u32, c: usize, x: i64, y: i64) -> f32 {
        let mut h = splitmix64(self.seed ^ u64::from(frame).wrapping_mul(0x100_0000_01b3));
        h = splitmix64(h ^ (c as u64) << 48 ^ (x as u64 & 0xffff) << 24 ^ (y as u64 & 0xff_ffff));
        // uniform in [-1, 1)
        ((h >> 11) as f64 / (1u64 << 52) as f64 - 1.0) as f32
    }

    /// Renders `region` of frame `frame_index`, where the target occupies `bbox`.
    pub fn render(&self, bbox: &BoundingBox, frame_index: u32, region: &BoundingBox) -> Raster {
        let mut out = Raster::zeros(region.w as usize, region.h as usize, 3);
        for y in region.y..region.bottom() {
            for x in region.x..region.right() {
                let hit = self.vehicles.iter().rev().find(|v| {
                    let bx = bbox.x + v.offset[0];
                    let by = bbox.y + v.offset[1];
                    x >= bx && x < bx + bbox.w && y >= by && y < by + bbox.h
                });
                for c in 0..3 {
                    let mut value = match hit {
                        Some(v) => v.shade(
                            c,
                            x - bbox.x - v.offset[0],
                            y - bbox.y - v.offset[1],
                            bbox.w,
                            bbox.h,
                        ),
                        None => self.background,
                    };
                    if self.noise > 0.0 {
                        value = (value + self.noise * self.noise_at(frame_index, c, x, y))
                            .clamp(0.0, 1.0);
                    }
                    out.set(c, (x - region.x) as usize, (y - region.y) as usize, value);
                }
            }
        }
        out
    }
}

/// Scene specs keyed by track id.
#[derive(Debug, Clone, Default)]
pub struct SceneLibrary {
    pub scenes: HashMap<String, SceneSpec>,
}

impl FrameSource for SceneLibrary {
    fn region(&self, track: &Track, frame: &FrameEntry, region: &BoundingBox) -> Result<Raster> {
        let scene = self.scenes.get(track.id()).ok_or_else(|| {
            OmgError::InvalidTrack(format!("track {:?} has no scene description", track.id()))
        })?;
        Ok(scene.render(&frame.bbox, frame.frame_index, region))
    }
}

/// Frames stored as `<root>/<track id>/<frame index>.omgt`, each a
/// `3 x H x W` tensor with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct FrameDirectory {
    pub root: PathBuf,
}

impl FrameSource for FrameDirectory {
    fn region(&self, track: &Track, frame: &FrameEntry, region: &BoundingBox) -> Result<Raster> {
        let path = self
            .root
            .join(track.id())
            .join(format!("{}.omgt", frame.frame_index));
        let tensor = read_tensor(&mut BufReader::new(File::open(&path)?))?;
        let image = tensor.into_raster()?;
        if image.channels() != 3 {
            return Err(OmgError::Shape(format!(
                "{} has {} channels",
                path.display(),
                image.channels()
            )));
        }
        image.crop(region)
    }
}

/// Tries the scene library first, then the frame directory.
pub struct CombinedSource {
    pub scenes: SceneLibrary,
    pub frames: Option<FrameDirectory>,
}

impl FrameSource for CombinedSource {
    fn region(&self, track: &Track, frame: &FrameEntry, region: &BoundingBox) -> Result<Raster> {
        match (&self.frames, self.scenes.scenes.contains_key(track.id())) {
            (_, true) => self.scenes.region(track, frame, region),
            (Some(dir), false) => dir.region(track, frame, region),
            (None, false) => Err(OmgError::InvalidTrack(format!(
                "no pixel source for track {:?}: add a scene or pass a frame directory",
                track.id()
            ))),
        }
    }
}
