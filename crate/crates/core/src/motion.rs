//! Foreground motion maps: the kept vehicle crops pasted onto a black canvas,
//! plus a thick line through the box centers, stacked as four channels.

use std::io::Write;

use crate::error::{OmgError, Result};
use crate::geometry::{filter_overlapping_boxes, DEFAULT_OVERLAP_THRESHOLD};
use crate::raster::Raster;
use crate::track::{FrameEntry, FrameSize, Track};

pub const MOTION_CHANNELS: usize = 4;

/// Rasterization settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionConfig {
    pub out_width: usize,
    pub out_height: usize,
    /// Trajectory line thickness in native-resolution pixels.
    pub thickness: u32,
    pub overlap_threshold: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            out_width: 384,
            out_height: 384,
            thickness: 9,
            overlap_threshold: DEFAULT_OVERLAP_THRESHOLD,
        }
    }
}

/// Four-plane raster: channels 0-2 are the foreground composite, channel 3
/// the trajectory mask. All values lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionMap {
    raster: Raster,
}

impl MotionMap {
    pub fn from_raster(raster: Raster) -> Result<Self> {
        if raster.channels() != MOTION_CHANNELS {
            return Err(OmgError::Shape(format!(
                "motion map needs {MOTION_CHANNELS} channels, got {}",
                raster.channels()
            )));
        }
        if let Some(v) = raster.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(OmgError::InvalidArgument(format!(
                "motion map value {v} outside [0, 1]"
            )));
        }
        Ok(Self { raster })
    }

    pub fn raster(&self) -> &Raster {
        &self.raster
    }

    pub fn into_raster(self) -> Raster {
        self.raster
    }

    pub fn width(&self) -> usize {
        self.raster.width()
    }

    pub fn height(&self) -> usize {
        self.raster.height()
    }

    pub fn mask(&self) -> &[f32] {
        self.raster.plane(3)
    }

    /// Writes channel 3 as a binary 8-bit PGM.
    pub fn write_mask_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width(), self.height())?;
        let bytes: Vec<u8> = self
            .mask()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        out.write_all(&bytes)?;
        Ok(())
    }
}

/// Pastes each crop at its box on a black canvas of the frame size, in the
/// given (chronological) order; later crops overwrite earlier pixels. Parts
/// of a box outside the frame are dropped.
pub fn paste_crops(frame_size: FrameSize, kept: &[FrameEntry], crops: &[Raster]) -> Result<Raster> {
    if crops.is_empty() {
        return Err(OmgError::Shape("no crops to composite".into()));
    }
    if crops.len() != kept.len() {
        return Err(OmgError::Shape(format!(
            "{} crops for {} kept boxes",
            crops.len(),
            kept.len()
        )));
    }
    let (fw, fh) = (frame_size.width as i64, frame_size.height as i64);
    let mut canvas = Raster::zeros(fw as usize, fh as usize, 3);
    for (entry, crop) in kept.iter().zip(crops) {
        let b = entry.bbox;
        if crop.width() as i64 != b.w || crop.height() as i64 != b.h || crop.channels() != 3 {
            return Err(OmgError::Shape(format!(
                "crop {}x{}x{} does not match box {:?} at frame {}",
                crop.channels(),
                crop.height(),
                crop.width(),
                b.as_array(),
                entry.frame_index
            )));
        }
        let Some(visible) = b.intersect(&frame_size.rect()) else {
            continue;
        };
        for c in 0..3 {
            for y in visible.y..visible.bottom() {
                for x in visible.x..visible.right() {
                    let v = crop.get(c, (x - b.x) as usize, (y - b.y) as usize);
                    canvas.set(c, x as usize, y as usize, v);
                }
            }
        }
    }
    Ok(canvas)
}

/// Foreground composite for a track: `crops` correspond one-to-one to the
/// boxes that survive the overlap filter.
pub fn composite_foreground(
    track: &Track,
    crops: &[Raster],
    overlap_threshold: f64,
) -> Result<Raster> {
    let kept = filter_overlapping_boxes(track.frames(), overlap_threshold)?;
    paste_crops(track.frame_size(), &kept, crops)
}

/// Binary mask of every pixel within `thickness / 2` (Euclidean, pixel
/// coordinates at integer positions) of a segment joining consecutive box
/// centers. A single center yields a disk.
pub fn rasterize_trajectory(
    frames: &[FrameEntry],
    canvas: FrameSize,
    thickness: u32,
) -> Result<Raster> {
    if frames.is_empty() {
        return Err(OmgError::EmptyTrajectory);
    }
    if thickness == 0 {
        return Err(OmgError::InvalidArgument(
            "line thickness must be at least 1".into(),
        ));
    }
    let centers: Vec<(f64, f64)> = frames.iter().map(|f| f.bbox.center()).collect();
    let mut mask = Raster::zeros(canvas.width as usize, canvas.height as usize, 1);
    let radius = thickness as f64 / 2.0;
    if centers.len() == 1 {
        stamp_segment(&mut mask, centers[0], centers[0], radius);
    }
    for pair in centers.windows(2) {
        stamp_segment(&mut mask, pair[0], pair[1], radius);
    }
    Ok(mask)
}

fn stamp_segment(mask: &mut Raster, a: (f64, f64), b: (f64, f64), radius: f64) {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let x_lo = ((a.0.min(b.0) - radius).floor() as i64).max(0);
    let x_hi = ((a.0.max(b.0) + radius).ceil() as i64).min(w - 1);
    let y_lo = ((a.1.min(b.1) - radius).floor() as i64).max(0);
    let y_hi = ((a.1.max(b.1) + radius).ceil() as i64).min(h - 1);
    let r2 = radius * radius;
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for py in y_lo..=y_hi {
        for px in x_lo..=x_hi {
            let (ux, uy) = (px as f64 - a.0, py as f64 - a.1);
            let dot = ux * dx + uy * dy;
            let inside = if len2 == 0.0 || dot <= 0.0 {
                ux * ux + uy * uy <= r2
            } else if dot >= len2 {
                let (vx, vy) = (px as f64 - b.0, py as f64 - b.1);
                vx * vx + vy * vy <= r2
            } else {
                // perpendicular distance^2 = cross^2 / len2
                let cross = ux * dy - uy * dx;
                cross * cross <= r2 * len2
            };
            if inside {
                mask.set(0, px as usize, py as usize, 1.0);
            }
        }
    }
}

/// Builds the motion map at native resolution, then resizes both parts to
/// the output size bilinearly. The resized mask is left soft.
pub fn build_motion_map(
    track: &Track,
    crops: &[Raster],
    config: &MotionConfig,
) -> Result<MotionMap> {
    let kept = filter_overlapping_boxes(track.frames(), config.overlap_threshold)?;
    let foreground = paste_crops(track.frame_size(), &kept, crops)?;
    let mask = rasterize_trajectory(&kept, track.frame_size(), config.thickness)?;
    let foreground = foreground.resize_bilinear(config.out_width, config.out_height)?;
    let mask = mask.resize_bilinear(config.out_width, config.out_height)?;
    MotionMap::from_raster(Raster::stack(&[foreground, mask])?)
}
