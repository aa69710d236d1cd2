//! Box geometry and frame sampling shared by preprocessing and evaluation.

use crate::error::{OmgError, Result};
use crate::track::{BoundingBox, FrameEntry, FrameSize};

/// Overlap threshold above which a later box is dropped from the motion map.
pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.9;

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersect(b).map_or(0, |i| i.area());
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Grows `[x, y, w, h]` to `[x - w, y - h, 3w, 3h]` and clips it to the frame.
pub fn expand_context_box(bbox: &BoundingBox, frame: FrameSize) -> Result<BoundingBox> {
    let grown = BoundingBox {
        x: bbox.x - bbox.w,
        y: bbox.y - bbox.h,
        w: 3 * bbox.w,
        h: 3 * bbox.h,
    };
    grown.intersect(&frame.rect()).ok_or_else(|| {
        OmgError::InvalidBox(format!(
            "box {:?} lies outside the {}x{} frame",
            bbox.as_array(),
            frame.width,
            frame.height
        ))
    })
}

/// Indices of the boxes kept by a greedy chronological scan: a box survives
/// when its IoU with every previously kept box is at most `threshold`.
pub fn overlap_filter_indices(frames: &[FrameEntry], threshold: f64) -> Result<Vec<usize>> {
    if frames.is_empty() {
        return Err(OmgError::EmptyTrajectory);
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(OmgError::InvalidArgument(format!(
            "overlap threshold must lie in (0, 1], got {threshold}"
        )));
    }
    let mut kept: Vec<usize> = Vec::new();
    for (idx, entry) in frames.iter().enumerate() {
        let clear = kept
            .iter()
            .all(|&k| iou(&frames[k].bbox, &entry.bbox) <= threshold);
        if clear {
            kept.push(idx);
        }
    }
    Ok(kept)
}

/// The subsequence of frames whose boxes do not overlap a kept box by more
/// than `threshold`.
pub fn filter_overlapping_boxes(frames: &[FrameEntry], threshold: f64) -> Result<Vec<FrameEntry>> {
    Ok(overlap_filter_indices(frames, threshold)?
        .into_iter()
        .map(|i| frames[i])
        .collect())
}

/// Index of the middle frame, `floor(L / 2)`.
pub fn middle_frame_index(len: usize) -> Result<usize> {
    if len == 0 {
        return Err(OmgError::EmptyTrajectory);
    }
    Ok(len / 2)
}

pub fn sample_middle_frame(frames: &[FrameEntry]) -> Result<FrameEntry> {
    Ok(frames[middle_frame_index(frames.len())?])
}

/// `k` endpoint-inclusive, evenly spaced indices `round(i (L-1) / (k-1))`.
/// Indices repeat when the track is shorter than `k`; `k = 1` is the middle
/// frame.
pub fn uniform_indices(len: usize, k: usize) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(OmgError::EmptyTrajectory);
    }
    if k == 0 {
        return Err(OmgError::InvalidArgument(
            "sample count must be at least 1".into(),
        ));
    }
    if k == 1 {
        return Ok(vec![middle_frame_index(len)?]);
    }
    let span = len - 1;
    let steps = k - 1;
    // round-half-up of i*span/steps in exact integer arithmetic
    Ok((0..k)
        .map(|i| (2 * i * span + steps) / (2 * steps))
        .collect())
}

pub fn sample_uniform(frames: &[FrameEntry], k: usize) -> Result<Vec<FrameEntry>> {
    Ok(uniform_indices(frames.len(), k)?
        .into_iter()
        .map(|i| frames[i])
        .collect())
}
