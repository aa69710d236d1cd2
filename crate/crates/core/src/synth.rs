//! Seeded synthetic worlds with a planted text-vehicle alignment.
//!
//! Every vehicle identity has a color and a type; every track adds a motion
//! pattern, an optional following neighbor and templated sentences. Color
//! shows up in the crop pixels, type in the block shading pattern, motion in
//! the trajectory and the neighbor in the context crop, so each sentence
//! attribute has a visual counterpart.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OmgError, Result};
use crate::scene::{SceneLibrary, SceneSpec, SceneVehicle};
use crate::track::{BoundingBox, FrameEntry, FrameSize, Track};

pub const FRAME_WIDTH: u32 = 400;
pub const FRAME_HEIGHT: u32 = 300;
pub const BOX_WIDTH: i64 = 36;
pub const BOX_HEIGHT: i64 = 24;
pub const BACKGROUND: f32 = 0.15;

/// Colors as (lexicon word, RGB).
pub const PALETTE: [(&str, [f32; 3]); 8] = [
    ("black", [0.0, 0.0, 0.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("purple", [0.6, 0.0, 0.8]),
    ("orange", [1.0, 0.5, 0.0]),
];

/// Types as (lexicon phrase, shading pattern). The patterns are Walsh
/// functions on the 4x4 block grid: every one lights 8 blocks and any two
/// differ in 8.
pub const VEHICLE_TYPES: [(&str, u16); 8] = [
    ("sedan", 0x00ff),
    ("SUV", 0x0f0f),
    ("pickup truck", 0x3333),
    ("van", 0x5555),
    ("wagon", 0x0ff0),
    ("hatchback", 0x3c3c),
    ("coupe", 0x6666),
    ("bus", 0x5a5a),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MotionPattern {
    Straight,
    LeftTurn,
    RightTurn,
    LaneChange,
    Stopped,
}

impl MotionPattern {
    pub const ALL: [MotionPattern; 5] = [
        MotionPattern::Straight,
        MotionPattern::LeftTurn,
        MotionPattern::RightTurn,
        MotionPattern::LaneChange,
        MotionPattern::Stopped,
    ];

    fn phrases(self) -> [&'static str; 2] {
        match self {
            MotionPattern::Straight => [
                "goes straight through the intersection",
                "keeps driving straight",
            ],
            MotionPattern::LeftTurn => ["turns left at the intersection", "makes a left turn"],
            MotionPattern::RightTurn => ["turns right at the intersection", "makes a right turn"],
            MotionPattern::LaneChange => ["changes lanes", "switches to the other lane"],
            MotionPattern::Stopped => ["waits at the light", "stays stopped at the crossing"],
        }
    }

    /// Box center at `t` in `[0, 1]`, before jitter.
    fn center(self, t: f64) -> (f64, f64) {
        let bezier = |p0: (f64, f64), p1: (f64, f64), p2: (f64, f64)| {
            let s = 1.0 - t;
            (
                s * s * p0.0 + 2.0 * s * t * p1.0 + t * t * p2.0,
                s * s * p0.1 + 2.0 * s * t * p1.1 + t * t * p2.1,
            )
        };
        match self {
            MotionPattern::Straight => (70.0 + 260.0 * t, 150.0),
            MotionPattern::LeftTurn => bezier((70.0, 230.0), (260.0, 230.0), (260.0, 50.0)),
            MotionPattern::RightTurn => bezier((70.0, 70.0), (260.0, 70.0), (260.0, 240.0)),
            MotionPattern::LaneChange => {
                let s = t * t * (3.0 - 2.0 * t);
                (70.0 + 260.0 * t, 110.0 + 80.0 * s)
            }
            MotionPattern::Stopped => (190.0 + 20.0 * t, 150.0),
        }
    }
}

/// Latent description of one track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleLatent {
    pub id: usize,
    pub color: usize,
    pub vtype: usize,
    pub motion: MotionPattern,
    /// (color, type) of a vehicle following at a fixed offset.
    pub neighbor: Option<(usize, usize)>,
    pub jitter: (i64, i64),
    pub first_frame: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Distinct vehicle identities.
    pub n_vehicles: usize,
    /// Amplitude of the uniform pixel noise.
    pub noise: f32,
    /// Identities that appear in several tracks.
    pub repeated_ids: usize,
    pub tracks_per_repeated_id: usize,
    pub frames_per_track: usize,
    pub neighbor_prob: f64,
    /// Chance that a sentence mentions an unrelated vehicle.
    pub distractor_prob: f64,
    /// Chance that a sentence leaves out the color or the type.
    pub omit_prob: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_vehicles: 32,
            noise: 0.05,
            repeated_ids: 8,
            tracks_per_repeated_id: 3,
            frames_per_track: 20,
            neighbor_prob: 0.5,
            distractor_prob: 0.4,
            omit_prob: 0.2,
        }
    }
}

impl SyntheticConfig {
    /// One track per identity.
    pub fn single(n_vehicles: usize, noise: f32) -> Self {
        Self {
            n_vehicles,
            noise,
            repeated_ids: 0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_vehicles < 2 {
            return Err(OmgError::InvalidArgument(format!(
                "a synthetic world needs at least 2 vehicles, got {}",
                self.n_vehicles
            )));
        }
        if self.repeated_ids > self.n_vehicles {
            return Err(OmgError::InvalidArgument(format!(
                "{} repeated ids out of {} vehicles",
                self.repeated_ids, self.n_vehicles
            )));
        }
        if self.repeated_ids > 0
            && !(2..=MotionPattern::ALL.len()).contains(&self.tracks_per_repeated_id)
        {
            return Err(OmgError::InvalidArgument(format!(
                "tracks per repeated id must be in 2..={}",
                MotionPattern::ALL.len()
            )));
        }
        if self.frames_per_track == 0 {
            return Err(OmgError::InvalidArgument(
                "tracks need at least one frame".into(),
            ));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(OmgError::InvalidArgument(format!(
                "noise {} outside [0, 0.5]",
                self.noise
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub config: SyntheticConfig,
    /// One latent per track, aligned with `tracks` and `scenes`.
    pub vehicles: Vec<VehicleLatent>,
    pub tracks: Vec<Track>,
    pub scenes: Vec<SceneSpec>,
}

impl SyntheticWorld {
    pub fn scene_library(&self) -> SceneLibrary {
        SceneLibrary {
            scenes: self
                .tracks
                .iter()
                .zip(&self.scenes)
                .map(|(t, s)| (t.id().to_owned(), s.clone()))
                .collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.config.n_vehicles
    }
}

/// World with one track per vehicle and default sentence settings.
pub fn generate_synthetic(seed: u64, n_vehicles: usize, noise: f32) -> Result<SyntheticWorld> {
    generate_world(seed, &SyntheticConfig::single(n_vehicles, noise))
}

pub fn generate_world(seed: u64, config: &SyntheticConfig) -> Result<SyntheticWorld> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // distinct (color, type) per identity while the palette allows it
    let mut combos: Vec<(usize, usize)> = (0..PALETTE.len())
        .flat_map(|c| (0..VEHICLE_TYPES.len()).map(move |t| (c, t)))
        .collect();
    combos.shuffle(&mut rng);
    let identities: Vec<(usize, usize)> = (0..config.n_vehicles)
        .map(|i| {
            combos.get(i).copied().unwrap_or_else(|| {
                (
                    rng.gen_range(0..PALETTE.len()),
                    rng.gen_range(0..VEHICLE_TYPES.len()),
                )
            })
        })
        .collect();

    let mut vehicles = Vec::new();
    for (id, &(color, vtype)) in identities.iter().enumerate() {
        let motions: Vec<MotionPattern> = if id < config.repeated_ids {
            MotionPattern::ALL
                .choose_multiple(&mut rng, config.tracks_per_repeated_id)
                .copied()
                .collect()
        } else {
            vec![*MotionPattern::ALL.choose(&mut rng).expect("non-empty")]
        };
        for motion in motions {
            let neighbor = rng.gen_bool(config.neighbor_prob).then(|| {
                (
                    rng.gen_range(0..PALETTE.len()),
                    rng.gen_range(0..VEHICLE_TYPES.len()),
                )
            });
            vehicles.push(VehicleLatent {
                id,
                color,
                vtype,
                motion,
                neighbor,
                jitter: (rng.gen_range(-10..=10), rng.gen_range(-10..=10)),
                first_frame: rng.gen_range(0..50),
            });
        }
    }

    let mut tracks = Vec::with_capacity(vehicles.len());
    let mut scenes = Vec::with_capacity(vehicles.len());
    let mut seen = vec![0usize; config.n_vehicles];
    for latent in &vehicles {
        let name = format!("v{:03}-{}", latent.id, seen[latent.id]);
        seen[latent.id] += 1;
        let sentences = [0, 1, 2].map(|slot| sentence(latent, slot, config, &mut rng));
        let noise_seed = rng.gen();
        tracks.push(build_track(
            &name,
            latent,
            config.frames_per_track,
            sentences,
        )?);
        scenes.push(render_spec(latent, config.noise, noise_seed));
    }

    Ok(SyntheticWorld {
        seed,
        config: config.clone(),
        vehicles,
        tracks,
        scenes,
    })
}

/// Track geometry of a latent: box centers along the motion path.
pub fn build_track(
    name: &str,
    latent: &VehicleLatent,
    frames: usize,
    sentences: [String; 3],
) -> Result<Track> {
    let entries = (0..frames)
        .map(|i| {
            let t = if frames == 1 {
                0.5
            } else {
                i as f64 / (frames - 1) as f64
            };
            let (cx, cy) = latent.motion.center(t);
            let x = (cx + latent.jitter.0 as f64).round() as i64 - BOX_WIDTH / 2;
            let y = (cy + latent.jitter.1 as f64).round() as i64 - BOX_HEIGHT / 2;
            Ok(FrameEntry {
                frame_index: latent.first_frame + i as u32,
                bbox: BoundingBox::new(x, y, BOX_WIDTH, BOX_HEIGHT)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Track::new(
        name,
        latent.id,
        entries,
        FrameSize::new(FRAME_WIDTH, FRAME_HEIGHT)?,
        sentences,
    )
}

/// Scene of a latent; with zero noise it depends on the latent alone.
pub fn render_spec(latent: &VehicleLatent, noise: f32, noise_seed: u64) -> SceneSpec {
    let vehicle = |color: usize, vtype: usize, offset: [i64; 2]| SceneVehicle {
        color: PALETTE[color].1,
        pattern: VEHICLE_TYPES[vtype].1,
        offset,
    };
    let mut vehicles = Vec::new();
    if let Some((c, t)) = latent.neighbor {
        vehicles.push(vehicle(c, t, [-(BOX_WIDTH + 4), 2]));
    }
    vehicles.push(vehicle(latent.color, latent.vtype, [0, 0]));
    SceneSpec {
        background: BACKGROUND,
        noise,
        seed: if noise > 0.0 { noise_seed } else { 0 },
        vehicles,
    }
}

fn sentence(
    latent: &VehicleLatent,
    slot: usize,
    config: &SyntheticConfig,
    rng: &mut ChaCha8Rng,
) -> String {
    let color = PALETTE[latent.color].0;
    let vtype = VEHICLE_TYPES[latent.vtype].0;
    // the first sentence always names both attributes
    let omit = if slot > 0 && rng.gen_bool(config.omit_prob) {
        rng.gen_range(0..2)
    } else {
        2
    };
    let subject = match omit {
        0 => format!("{} {vtype}", ["A", "The"][rng.gen_range(0..2)]),
        1 => format!(
            "{} {color} {}",
            ["A", "The"][rng.gen_range(0..2)],
            ["car", "vehicle"][rng.gen_range(0..2)]
        ),
        _ => format!("{} {color} {vtype}", ["A", "The"][rng.gen_range(0..2)]),
    };
    let motion = latent.motion.phrases()[rng.gen_range(0..2)];
    let clause = match latent.neighbor {
        // a clause after an incomplete subject would win the attribute vote
        _ if omit < 2 => String::new(),
        Some((nc, nt)) if rng.gen_bool(0.5) => {
            format!(", followed by a {} {}", PALETTE[nc].0, VEHICLE_TYPES[nt].0)
        }
        _ if rng.gen_bool(config.distractor_prob) => {
            let dc = (latent.color + rng.gen_range(1..PALETTE.len())) % PALETTE.len();
            let dt = (latent.vtype + rng.gen_range(1..VEHICLE_TYPES.len())) % VEHICLE_TYPES.len();
            format!(" next to a {} {}", PALETTE[dc].0, VEHICLE_TYPES[dt].0)
        }
        _ => String::new(),
    };
    format!("{subject} {motion}{clause}.")
}
