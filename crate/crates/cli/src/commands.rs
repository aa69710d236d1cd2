use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::info;
use omg_core::geometry::{expand_context_box, overlap_filter_indices, sample_middle_frame};
use omg_core::io::{load_tracks, tracks_to_json, world_records, TrackSet};
use omg_core::loss::LossWeights;
use omg_core::model::{
    attach_augmentations, extract_features, track_motion_map, FeatureConfig, GranularityConfig,
    InitConfig, OmgModel,
};
use omg_core::retrieval::SimilarityTensor;
use omg_core::scene::{CombinedSource, FrameDirectory};
use omg_core::synth::{generate_world, SyntheticConfig};
use omg_core::tensor_file::{read_tensor, write_tensor, Tensor};
use omg_core::train::{
    evaluate, evaluate_tensor, train, write_trace_csv, EpochRecord, EvalReport, TrainConfig,
};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{GranularityToggles, RunConfig};
use crate::{Command, EvalArgs, Inputs, PreprocessArgs, PromptArgs, SynthArgs, TrainArgs};

/// A missing or contradictory argument; exits with the usage code.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn run(command: Command, cfg: RunConfig) -> anyhow::Result<()> {
    match command {
        Command::Preprocess(args) => preprocess(args, &cfg),
        Command::Prompt(args) => prompt(args, &cfg),
        Command::Train(args) => train_cmd(args, &cfg),
        Command::Eval(args) => eval(args, &cfg),
        Command::Synth(args) => synth(args, &cfg),
    }
}

fn pick(flag: Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
    flag.or_else(|| file.clone()).ok_or_else(|| {
        Usage(format!(
            "missing --{name} (or \"{name}\" in the config file)"
        ))
        .into()
    })
}

fn load_set(inputs: &Inputs, cfg: &RunConfig) -> anyhow::Result<(TrackSet, CombinedSource)> {
    let path = pick(inputs.tracks.clone(), &cfg.tracks, "tracks")?;
    let set = load_tracks(&path).with_context(|| format!("loading {}", path.display()))?;
    for t in &set.tracks {
        check_file_name(t.id())?;
    }
    let source = CombinedSource {
        scenes: set.scenes.clone(),
        frames: inputs
            .frames
            .clone()
            .or_else(|| cfg.frames.clone())
            .map(|root| FrameDirectory { root }),
    };
    Ok((set, source))
}

/// Track ids become file names.
fn check_file_name(id: &str) -> anyhow::Result<()> {
    if id.is_empty() || id == "." || id == ".." || id.contains(['/', '\\', '\0']) {
        bail!("track id {id:?} cannot be used as a file name");
    }
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn json_bytes<T: Serialize>(value: &T) -> anyhow::Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn tensor_bytes(tensor: &Tensor) -> anyhow::Result<Vec<u8>> {
    let mut bytes = Vec::new();
    write_tensor(&mut bytes, tensor)?;
    Ok(bytes)
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(&json_bytes(value)?)?;
    out.flush()?;
    Ok(())
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

#[derive(Serialize)]
struct BoxEntry {
    frame_index: u32,
    target: [i64; 4],
    context: [i64; 4],
    /// Survived the overlap filter and was pasted into the motion map.
    in_motion_map: bool,
}

#[derive(Serialize)]
struct BoxFile<'a> {
    id: &'a str,
    frame_size: [u32; 2],
    frames: Vec<BoxEntry>,
}

#[derive(Serialize)]
struct ManifestEntry {
    id: String,
    motion_map: String,
    motion_map_sha256: String,
    boxes: String,
    boxes_sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    tracks: Vec<ManifestEntry>,
}

fn preprocess(args: PreprocessArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    let out = pick(args.out, &cfg.out, "out")?;
    let (set, source) = load_set(&args.inputs, cfg)?;
    let motion_cfg = FeatureConfig::default().motion;
    create_dir(&out.join("motion"))?;
    create_dir(&out.join("boxes"))?;
    info!("preprocessing {} tracks", set.tracks.len());
    let tracks = set
        .tracks
        .par_iter()
        .map(|t| -> anyhow::Result<ManifestEntry> {
            let map = track_motion_map(&source, t, &motion_cfg)?;
            let map_bytes = tensor_bytes(&Tensor::from(map.raster()))?;
            let kept = overlap_filter_indices(t.frames(), motion_cfg.overlap_threshold)?;
            let frames = t
                .frames()
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    Ok(BoxEntry {
                        frame_index: f.frame_index,
                        target: f.bbox.as_array(),
                        context: expand_context_box(&f.bbox, t.frame_size())?.as_array(),
                        in_motion_map: kept.contains(&i),
                    })
                })
                .collect::<omg_core::Result<Vec<_>>>()?;
            let fs = t.frame_size();
            let box_bytes = json_bytes(&BoxFile {
                id: t.id(),
                frame_size: [fs.width, fs.height],
                frames,
            })?;
            let motion_map = format!("motion/{}.omgt", t.id());
            let boxes = format!("boxes/{}.json", t.id());
            write_file(&out.join(&motion_map), &map_bytes)?;
            write_file(&out.join(&boxes), &box_bytes)?;
            Ok(ManifestEntry {
                id: t.id().to_owned(),
                motion_map,
                motion_map_sha256: sha256_hex(&map_bytes),
                boxes,
                boxes_sha256: sha256_hex(&box_bytes),
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .zip(&set.tracks)
        .map(|(r, t)| r.with_context(|| format!("track {:?}", t.id())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let manifest = Manifest { tracks };
    write_file(&out.join("manifest.json"), &json_bytes(&manifest)?)?;
    print_json(&manifest)
}

#[derive(Serialize)]
struct PromptRecord {
    id: String,
    color: Option<String>,
    #[serde(rename = "type")]
    vtype: Option<String>,
    prompt: String,
    global_text: String,
}

fn prompt(args: PromptArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    let path = pick(args.inputs.tracks, &cfg.tracks, "tracks")?;
    let set = load_tracks(&path).with_context(|| format!("loading {}", path.display()))?;
    let lexicon = cfg.lexicon()?;
    let records: Vec<PromptRecord> = set
        .tracks
        .iter()
        .map(|t| {
            let q = omg_core::text::QueryTexts::from_sentences(t.sentences(), &lexicon);
            PromptRecord {
                id: t.id().to_owned(),
                color: q
                    .attributes
                    .color
                    .as_deref()
                    .map(|c| lexicon.colors.display(c).to_owned()),
                vtype: q
                    .attributes
                    .vtype
                    .as_deref()
                    .map(|v| lexicon.types.display(v).to_owned()),
                prompt: q.prompt_text,
                global_text: q.global_text,
            }
        })
        .collect();
    print_json(&records)
}

#[derive(Serialize)]
struct TrainSummary {
    checkpoint: String,
    loss_csv: String,
    tracks: usize,
    classes: usize,
    granularity: GranularityConfig,
    epochs: usize,
    #[serde(rename = "final")]
    last: Option<EpochRecord>,
}

fn train_cmd(args: TrainArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    let out = pick(args.out, &cfg.out, "out")?;
    let (set, source) = load_set(&args.inputs, cfg)?;
    let granularity = GranularityToggles::from(&args.toggles).resolve(cfg.granularity);
    let mut schedule = cfg.schedule();
    if let Some(e) = args.epochs {
        schedule.total_epochs = e;
    }
    if let Some(w) = args.warmup {
        schedule.warmup_epochs = w;
    }
    if let Some(lr) = args.lr {
        schedule.base_lr = lr;
    }
    if let Some(lr) = args.min_lr {
        schedule.min_lr = lr;
    }
    schedule.validate()?;
    let base = cfg.weights();
    let weights = LossWeights::new(
        args.lambda1.unwrap_or(base.lambda1),
        args.lambda2.unwrap_or(base.lambda2),
    )?;
    let seed = cfg.seed.unwrap_or(0);
    let train_cfg = TrainConfig {
        batch_size: args
            .batch_size
            .or(cfg.batch_size)
            .unwrap_or(TrainConfig::default().batch_size),
        schedule,
        weights,
        seed,
    };
    let init = InitConfig {
        dim: args.dim.or(cfg.dim).unwrap_or(InitConfig::default().dim),
        ..InitConfig::default()
    };
    let features = FeatureConfig::default();
    let lexicon = cfg.lexicon()?;

    info!("extracting features for {} tracks", set.tracks.len());
    let mut data = extract_features(&set.tracks, &source, &lexicon, &features, &granularity)?;
    if !set.augmentations.is_empty() {
        info!("{} tracks carry paraphrases", set.augmentations.len());
        attach_augmentations(
            &mut data,
            &set.augmentations,
            &lexicon,
            &features,
            &granularity,
        )?;
    }
    let classes = set.num_classes();
    let mut model = OmgModel::seeded(features, granularity, &init, classes, seed)?;
    info!(
        "training {} epochs, {} text and {} visual granularities",
        schedule.total_epochs,
        model.n_text(),
        model.n_visual()
    );
    let trace = train(&mut model, &data, &train_cfg)?;
    if let Some(last) = trace.last() {
        info!(
            "final loss {:.4} (info {:.4}, id {:.4}), tau {:.4}",
            last.total, last.info, last.id, last.tau
        );
    }

    create_dir(&out)?;
    let checkpoint = out.join("checkpoint.omgt");
    let mut bytes = Vec::new();
    model.save(&mut bytes)?;
    write_file(&checkpoint, &bytes)?;
    let loss_csv = out.join("loss.csv");
    let mut csv = Vec::new();
    write_trace_csv(&trace, &mut csv)?;
    write_file(&loss_csv, &csv)?;

    print_json(&TrainSummary {
        checkpoint: checkpoint.display().to_string(),
        loss_csv: loss_csv.display().to_string(),
        tracks: set.tracks.len(),
        classes,
        granularity,
        epochs: trace.len(),
        last: trace.last().copied(),
    })
}

#[derive(Serialize)]
struct QueryResult<'a> {
    query_id: &'a str,
    rank: usize,
    top: Vec<&'a str>,
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    mrr: f64,
    #[serde(rename = "recall@5")]
    recall_at_5: f64,
    #[serde(rename = "recall@10")]
    recall_at_10: f64,
    per_query: Vec<QueryResult<'a>>,
}

fn eval_output(report: &EvalReport) -> EvalOutput<'_> {
    let gallery = &report.ranking.gallery_ids;
    EvalOutput {
        mrr: report.mrr,
        recall_at_5: report.recall_at_5,
        recall_at_10: report.recall_at_10,
        per_query: report
            .query_ids
            .iter()
            .zip(&report.ranking.queries)
            .map(|(id, q)| QueryResult {
                query_id: id,
                rank: q.rank,
                top: q
                    .order
                    .iter()
                    .take(10)
                    .map(|&g| gallery[g].as_str())
                    .collect(),
            })
            .collect(),
    }
}

fn eval(args: EvalArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    let report = if let Some(path) = &args.similarity {
        let tensor = read_tensor(
            &mut fs::File::open(path).with_context(|| format!("opening {}", path.display()))?,
        )
        .with_context(|| format!("reading {}", path.display()))?;
        let &[q, g, p] = tensor.dims() else {
            bail!(
                "similarity tensor must have 3 dims, found {:?}",
                tensor.dims()
            );
        };
        let sim = SimilarityTensor::new(q, g, p, tensor.to_f64())?;
        let ids: Vec<String> = match args.inputs.tracks.clone().or_else(|| cfg.tracks.clone()) {
            Some(path) => load_tracks(&path)
                .with_context(|| format!("loading {}", path.display()))?
                .tracks
                .iter()
                .map(|t| t.id().to_owned())
                .collect(),
            None => (0..g).map(|i| i.to_string()).collect(),
        };
        evaluate_tensor(&sim, &ids)?
    } else {
        let path = pick(args.checkpoint, &cfg.checkpoint, "checkpoint")?;
        let features = FeatureConfig::default();
        let model = OmgModel::load(
            &mut std::io::BufReader::new(
                fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?,
            ),
            features,
        )
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
        let (set, source) = load_set(&args.inputs, cfg)?;
        let lexicon = cfg.lexicon()?;
        let data = extract_features(
            &set.tracks,
            &source,
            &lexicon,
            &features,
            &model.granularity,
        )?;
        let mft = args.mft.or(cfg.mft).unwrap_or(1);
        info!(
            "ranking {} tracks with {mft} frame(s) per gallery item",
            data.len()
        );
        evaluate(&model, &data, mft)?
    };
    info!(
        "mrr {:.4}, recall@5 {:.4}, recall@10 {:.4}",
        report.mrr, report.recall_at_5, report.recall_at_10
    );
    let output = eval_output(&report);
    if let Some(out) = &args.out {
        write_file(out, &json_bytes(&output)?)?;
    }
    print_json(&output)
}

#[derive(Serialize)]
struct SynthSummary {
    seed: u64,
    vehicles: usize,
    tracks: usize,
    tracks_json: String,
}

fn synth(args: SynthArgs, cfg: &RunConfig) -> anyhow::Result<()> {
    let out = pick(args.out, &cfg.out, "out")?;
    let seed = cfg.seed.unwrap_or(0);
    let config = SyntheticConfig {
        n_vehicles: args.n,
        noise: args.noise,
        repeated_ids: args.repeated_ids.unwrap_or(args.n.min(8)),
        frames_per_track: args.frames_per_track,
        ..SyntheticConfig::default()
    };
    let world = generate_world(seed, &config)?;
    info!(
        "generated {} tracks of {} vehicles",
        world.tracks.len(),
        args.n
    );

    create_dir(&out.join("rasters"))?;
    let tracks_json = out.join("tracks.json");
    let mut json = tracks_to_json(&world_records(&world))?.into_bytes();
    json.push(b'\n');
    write_file(&tracks_json, &json)?;

    // middle frame of every track, as a 3 x H x W image
    world.tracks.par_iter().zip(&world.scenes).try_for_each(
        |(t, scene)| -> anyhow::Result<()> {
            let rect = t.frame_size().rect();
            let mid = sample_middle_frame(t.frames())?;
            let image = scene.render(&mid.bbox, mid.frame_index, &rect);
            write_file(
                &out.join("rasters").join(format!("{}.omgt", t.id())),
                &tensor_bytes(&Tensor::from(&image))?,
            )?;
            if args.write_frames {
                let dir = out.join("frames").join(t.id());
                create_dir(&dir)?;
                for f in t.frames() {
                    let image = scene.render(&f.bbox, f.frame_index, &rect);
                    write_file(
                        &dir.join(format!("{}.omgt", f.frame_index)),
                        &tensor_bytes(&Tensor::from(&image))?,
                    )?;
                }
            }
            Ok(())
        },
    )?;

    print_json(&SynthSummary {
        seed,
        vehicles: args.n,
        tracks: world.tracks.len(),
        tracks_json: tracks_json.display().to_string(),
    })
}
