//! Track ingestion JSON.
//!
//! A file holds an array of records:
//!
//! ```json
//! [{"id": "v000-0", "class_id": 0, "frame_size": [400, 300],
//!   "frames": [[12, 40, 60, 36, 24], ...],
//!   "nl": ["A red sedan turns left.", "...", "..."],
//!   "scene": {...}}]
//! ```
//!
//! `frames` rows are `[frame_index, x, y, w, h]`. `class_id` defaults to the
//! record's position. Only the first three `nl` sentences are used. `scene`
//! is optional and describes synthetic pixels. `nl_aug` optionally lists
//! paraphrases of `nl`, each a list of at least three sentences, used as
//! alternative training text.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{OmgError, Result};
use crate::scene::{SceneLibrary, SceneSpec};
use crate::synth::SyntheticWorld;
use crate::track::{BoundingBox, FrameEntry, FrameSize, Track};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
    pub frame_size: [u32; 2],
    pub frames: Vec<[i64; 5]>,
    pub nl: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nl_aug: Vec<Vec<String>>,
}

fn first_three(sentences: &[String]) -> Result<[String; 3]> {
    match sentences {
        [a, b, c, ..] => Ok([a.clone(), b.clone(), c.clone()]),
        _ => Err(OmgError::InvalidTrack(format!(
            "expected 3 sentences, found {}",
            sentences.len()
        ))),
    }
}

impl TrackRecord {
    pub fn from_track(track: &Track, scene: Option<SceneSpec>) -> Self {
        let fs = track.frame_size();
        Self {
            id: track.id().to_owned(),
            class_id: Some(track.class_id()),
            frame_size: [fs.width, fs.height],
            frames: track
                .frames()
                .iter()
                .map(|f| {
                    let [x, y, w, h] = f.bbox.as_array();
                    [i64::from(f.frame_index), x, y, w, h]
                })
                .collect(),
            nl: track.sentences().to_vec(),
            scene,
            nl_aug: Vec::new(),
        }
    }

    /// Validated track; `position` is the default class id.
    pub fn to_track(&self, position: usize) -> Result<Track> {
        let frame_size = FrameSize::new(self.frame_size[0], self.frame_size[1])?;
        let frames = self
            .frames
            .iter()
            .map(|&[idx, x, y, w, h]| {
                let frame_index = u32::try_from(idx).map_err(|_| {
                    OmgError::InvalidTrack(format!("frame index {idx} out of range"))
                })?;
                Ok(FrameEntry {
                    frame_index,
                    bbox: BoundingBox::new(x, y, w, h)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Track::new(
            &self.id,
            self.class_id.unwrap_or(position),
            frames,
            frame_size,
            first_three(&self.nl)?,
        )
    }

    /// Paraphrase triples from `nl_aug`.
    pub fn augmentations(&self) -> Result<Vec<[String; 3]>> {
        self.nl_aug
            .iter()
            .map(|s| first_three(s).map_err(|e| OmgError::InvalidTrack(format!("nl_aug: {e}"))))
            .collect()
    }
}

fn record_error(index: usize, id: Option<&str>, err: impl std::fmt::Display) -> OmgError {
    match id {
        Some(id) => OmgError::InvalidTrack(format!("record {index} (id {id:?}): {err}")),
        None => OmgError::InvalidTrack(format!("record {index}: {err}")),
    }
}

/// Parses and validates every record, naming the first bad one.
pub fn parse_tracks(json: &str) -> Result<Vec<TrackRecord>> {
    let values: Vec<Value> = serde_json::from_str(json)?;
    let mut seen = std::collections::HashSet::new();
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let id = v.get("id").and_then(Value::as_str).map(str::to_owned);
            let record: TrackRecord =
                serde_json::from_value(v).map_err(|e| record_error(i, id.as_deref(), e))?;
            record
                .to_track(i)
                .and_then(|_| record.augmentations())
                .map_err(|e| record_error(i, Some(&record.id), e))?;
            if !seen.insert(record.id.clone()) {
                return Err(record_error(i, Some(&record.id), "duplicate id"));
            }
            Ok(record)
        })
        .collect()
}

/// Tracks with the scene descriptions and paraphrases that came with them.
#[derive(Debug, Clone, Default)]
pub struct TrackSet {
    pub tracks: Vec<Track>,
    pub scenes: SceneLibrary,
    pub augmentations: HashMap<String, Vec<[String; 3]>>,
}

impl TrackSet {
    pub fn from_records(records: &[TrackRecord]) -> Result<Self> {
        let mut set = TrackSet::default();
        for (i, r) in records.iter().enumerate() {
            set.tracks
                .push(r.to_track(i).map_err(|e| record_error(i, Some(&r.id), e))?);
            if let Some(scene) = &r.scene {
                set.scenes.scenes.insert(r.id.clone(), scene.clone());
            }
            if !r.nl_aug.is_empty() {
                let aug = r
                    .augmentations()
                    .map_err(|e| record_error(i, Some(&r.id), e))?;
                set.augmentations.insert(r.id.clone(), aug);
            }
        }
        Ok(set)
    }

    /// Number of ID classes implied by the largest class id.
    pub fn num_classes(&self) -> usize {
        self.tracks
            .iter()
            .map(|t| t.class_id() + 1)
            .max()
            .unwrap_or(0)
    }
}

pub fn load_tracks(path: &Path) -> Result<TrackSet> {
    TrackSet::from_records(&parse_tracks(&std::fs::read_to_string(path)?)?)
}

pub fn world_records(world: &SyntheticWorld) -> Vec<TrackRecord> {
    world
        .tracks
        .iter()
        .zip(&world.scenes)
        .map(|(t, s)| TrackRecord::from_track(t, Some(s.clone())))
        .collect()
}

pub fn tracks_to_json(records: &[TrackRecord]) -> Result<String> {
    Ok(serde_json::to_string_pretty(records)?)
}
