//! Batch assembly, plain gradient descent and evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{EmbeddingSet, GranularEmbeddings};
use crate::error::{OmgError, Result};
use crate::loss::{total_loss, LossBundle, LossWeights};
use crate::model::{ModelGrads, OmgModel, TrackFeatures};
use crate::retrieval::{
    fuse_similarities, mrr, rank_queries, recall_at_k, RankedResult, SimilarityTensor,
};
use crate::schedule::ScheduleConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 24,
            schedule: ScheduleConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

/// Track indices with the frame and text variant drawn for each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tracks: Vec<usize>,
    pub frames: Vec<usize>,
    /// See [`TrackFeatures::text_inputs`].
    pub texts: Vec<usize>,
}

/// `m` distinct tracks with one random frame each.
pub fn make_batch<R: Rng + ?Sized>(data: &[TrackFeatures], m: usize, rng: &mut R) -> Result<Batch> {
    if m == 0 || m > data.len() {
        return Err(OmgError::InvalidArgument(format!(
            "batch of {m} from {} tracks",
            data.len()
        )));
    }
    let tracks: Vec<usize> = rand::seq::index::sample(rng, data.len(), m).into_vec();
    Ok(with_random_frames(data, tracks, rng))
}

fn with_random_frames<R: Rng + ?Sized>(
    data: &[TrackFeatures],
    tracks: Vec<usize>,
    rng: &mut R,
) -> Batch {
    let frames = tracks
        .iter()
        .map(|&t| rng.gen_range(0..data[t].num_frames()))
        .collect();
    // no draws for tracks without paraphrases
    let texts = tracks
        .iter()
        .map(|&t| match data[t].text_variants.len() {
            0 => 0,
            n => rng.gen_range(0..=n),
        })
        .collect();
    Batch {
        tracks,
        frames,
        texts,
    }
}

/// Loss of one batch and gradients for every parameter.
pub fn forward_backward(
    model: &OmgModel,
    data: &[TrackFeatures],
    batch: &Batch,
    weights: LossWeights,
) -> Result<(LossBundle, ModelGrads)> {
    let (m, n_t, n_v, d) = (
        batch.tracks.len(),
        model.n_text(),
        model.n_visual(),
        model.dim(),
    );
    let mut text_out = Vec::with_capacity(m);
    let mut vis_out = Vec::with_capacity(m);
    let mut text = EmbeddingSet::zeros(m, n_t, d);
    let mut visual = EmbeddingSet::zeros(m, n_v, d);
    for (i, (&t, &f)) in batch.tracks.iter().zip(&batch.frames).enumerate() {
        let to = model.text_forward_variant(&data[t], batch.texts[i])?;
        let vo = model.visual_forward(&data[t], f)?;
        if to.len() != n_t || vo.len() != n_v {
            return Err(OmgError::Shape(format!(
                "track {} has {}/{} granularities, model expects {n_t}/{n_v}",
                data[t].id,
                to.len(),
                vo.len()
            )));
        }
        for (j, o) in to.iter().enumerate() {
            text.vector_mut(i, j).copy_from_slice(&o.embedding);
        }
        for (k, o) in vo.iter().enumerate() {
            visual.vector_mut(i, k).copy_from_slice(&o.embedding);
        }
        text_out.push(to);
        vis_out.push(vo);
    }
    let labels: Vec<usize> = batch.tracks.iter().map(|&t| data[t].label).collect();
    let emb = GranularEmbeddings::new(text, visual)?;
    let loss = total_loss(&emb, &labels, model.temperature, &model.id_head, weights)?;

    let mut grads = ModelGrads::zeros_like(model);
    for (i, &t) in batch.tracks.iter().enumerate() {
        for (j, x) in data[t].text_inputs(batch.texts[i]).iter().enumerate() {
            model.text.accumulate_backward(
                x,
                &text_out[i][j],
                loss.grad_text.vector(i, j),
                &mut grads.text,
            );
        }
        for (k, x) in data[t].visual(batch.frames[i]).into_iter().enumerate() {
            model.visual[k].accumulate_backward(
                x,
                &vis_out[i][k],
                loss.grad_visual.vector(i, k),
                &mut grads.visual[k],
            );
        }
    }
    grads.id_head = loss.grad_id_head.clone();
    grads.log_tau = loss.grad_log_tau;
    Ok((loss, grads))
}

/// `p - lr * g`.
pub fn sgd_step(params: &[f64], grads: &[f64], lr: f64) -> Vec<f64> {
    params.iter().zip(grads).map(|(p, g)| p - lr * g).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub info: f64,
    pub id: f64,
    pub total: f64,
    pub tau: f64,
}

/// Runs `schedule.total_epochs` epochs. Each epoch shuffles the tracks and
/// takes one gradient step per consecutive chunk of `batch_size`, with a
/// random frame per track. Losses are averaged over the epoch's batches.
pub fn train(
    model: &mut OmgModel,
    data: &[TrackFeatures],
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.schedule.validate()?;
    if data.is_empty() {
        return Err(OmgError::InvalidArgument("no tracks to train on".into()));
    }
    if cfg.batch_size == 0 {
        return Err(OmgError::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.schedule.total_epochs);
    for epoch in 0..cfg.schedule.total_epochs {
        let lr = cfg.schedule.lr_at(epoch)?;
        order.shuffle(&mut rng);
        let (mut info, mut id, mut total, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size.min(data.len())) {
            let batch = with_random_frames(data, chunk.to_vec(), &mut rng);
            let (loss, grads) = forward_backward(model, data, &batch, cfg.weights)?;
            model.apply_sgd(&grads, lr);
            info += loss.info;
            id += loss.id;
            total += loss.total;
            batches += 1;
        }
        let n = batches as f64;
        let tau = model.temperature.tau();
        if !tau.is_finite() || tau == 0.0 {
            return Err(OmgError::NonFinite(format!(
                "temperature {tau} after epoch {epoch}"
            )));
        }
        trace.push(EpochRecord {
            epoch,
            lr,
            info: info / n,
            id: id / n,
            total: total / n,
            tau,
        });
    }
    Ok(trace)
}

pub fn write_trace_csv<W: Write>(trace: &[EpochRecord], mut out: W) -> Result<()> {
    writeln!(out, "epoch,lr,l_info,l_id,l_total,tau")?;
    for r in trace {
        writeln!(
            out,
            "{},{:e},{},{},{},{}",
            r.epoch, r.lr, r.info, r.id, r.total, r.tau
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mrr: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub ranking: RankedResult,
    pub query_ids: Vec<String>,
}

/// Text-to-track similarities: every track's texts query a gallery of all
/// tracks, with visual embeddings averaged over `mft_k` frames.
pub fn similarity_tensor(
    model: &OmgModel,
    data: &[TrackFeatures],
    mft_k: usize,
) -> Result<SimilarityTensor> {
    let gallery = data
        .par_iter()
        .map(|t| model.multi_frame_embedding(t, mft_k))
        .collect::<Result<Vec<_>>>()?;
    let queries = data
        .par_iter()
        .map(|t| model.embed_text(t))
        .collect::<Result<Vec<_>>>()?;
    SimilarityTensor::from_embeddings(&queries, &gallery)
}

/// Ranks a `[Q, G, P]` tensor over the gallery `ids`, where query `i`
/// targets gallery item `i` (so `Q <= G`).
pub fn evaluate_tensor(tensor: &SimilarityTensor, ids: &[String]) -> Result<EvalReport> {
    if tensor.gallery() != ids.len() || tensor.queries() > ids.len() || tensor.queries() == 0 {
        return Err(OmgError::Shape(format!(
            "{}x{} similarity tensor for {} tracks",
            tensor.queries(),
            tensor.gallery(),
            ids.len()
        )));
    }
    let truth = &ids[..tensor.queries()];
    let ranking = rank_queries(&fuse_similarities(tensor), ids, truth)?;
    Ok(EvalReport {
        mrr: mrr(&ranking)?,
        recall_at_5: recall_at_k(&ranking, 5)?,
        recall_at_10: recall_at_k(&ranking, 10)?,
        ranking,
        query_ids: truth.to_vec(),
    })
}

pub fn evaluate(model: &OmgModel, data: &[TrackFeatures], mft_k: usize) -> Result<EvalReport> {
    let ids: Vec<String> = data.iter().map(|t| t.id.clone()).collect();
    evaluate_tensor(&similarity_tensor(model, data, mft_k)?, &ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{extract_features, FeatureConfig, GranularityConfig, InitConfig};
    use crate::synth::generate_synthetic;
    use crate::text::Lexicon;

    fn setup(n: usize, noise: f32) -> (OmgModel, Vec<TrackFeatures>) {
        let world = generate_synthetic(4, n, noise).unwrap();
        let g = GranularityConfig::default();
        let feats = extract_features(
            &world.tracks,
            &world.scene_library(),
            &Lexicon::default(),
            &FeatureConfig::default(),
            &g,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = OmgModel::new(
            FeatureConfig::default(),
            g,
            &InitConfig::default(),
            n,
            &mut rng,
        )
        .unwrap();
        (model, feats)
    }

    #[test]
    fn sgd_examples() {
        assert_eq!(sgd_step(&[1.0, -2.0], &[0.0, 0.0], 0.5), vec![1.0, -2.0]);
        assert_eq!(sgd_step(&[1.0, -2.0], &[3.0, 1.0], 0.0), vec![1.0, -2.0]);
        // f(p) = p^2 / 2 has gradient p
        assert!((sgd_step(&[1.0], &[1.0], 0.1)[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn paraphrases_are_drawn_in_training() {
        let (model, mut feats) = setup(4, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plain = make_batch(&feats, 4, &mut rng).unwrap();
        assert_eq!(plain.texts, vec![0; 4]);

        let s = |t: &str| [t, "It keeps going.", "Then it stops."].map(String::from);
        let aug = [(
            feats[0].id.clone(),
            vec![s("A gold jeep."), s("A maroon van.")],
        )]
        .into();
        crate::model::attach_augmentations(
            &mut feats,
            &aug,
            &Lexicon::default(),
            &FeatureConfig::default(),
            &model.granularity,
        )
        .unwrap();
        assert_eq!(feats[0].text_variants.len(), 2);
        assert!(feats[1].text_variants.is_empty());

        let mut seen = [false; 3];
        for _ in 0..60 {
            let b = make_batch(&feats, 4, &mut rng).unwrap();
            for (&t, &v) in b.tracks.iter().zip(&b.texts) {
                assert!(t == 0 || v == 0);
                if t == 0 {
                    seen[v] = true;
                }
            }
        }
        assert_eq!(seen, [true; 3]);

        let batch = |v| Batch {
            tracks: vec![0, 1],
            frames: vec![0, 0],
            texts: vec![v, 0],
        };
        let w = LossWeights::default();
        let (a, _) = forward_backward(&model, &feats, &batch(0), w).unwrap();
        let (b, _) = forward_backward(&model, &feats, &batch(2), w).unwrap();
        assert_ne!(a.info, b.info);
    }

    #[test]
    fn batches() {
        let (_, feats) = setup(6, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let full = make_batch(&feats, 6, &mut rng).unwrap();
        let mut sorted = full.tracks.clone();
        sorted.sort();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        assert!(make_batch(&feats, 7, &mut rng).is_err());
        let a = make_batch(&feats, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = make_batch(&feats, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_item_batch_has_zero_contrastive_loss() {
        let (model, feats) = setup(4, 0.0);
        let batch = make_batch(&feats, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (loss, _) = forward_backward(&model, &feats, &batch, LossWeights::default()).unwrap();
        assert_eq!(loss.info, 0.0);
    }

    #[test]
    fn zero_weights_freeze_parameters() {
        let (mut model, feats) = setup(4, 0.05);
        let before = model.clone();
        let cfg = TrainConfig {
            weights: LossWeights::new(0.0, 0.0).unwrap(),
            schedule: ScheduleConfig {
                total_epochs: 5,
                warmup_epochs: 2,
                ..ScheduleConfig::default()
            },
            ..TrainConfig::default()
        };
        train(&mut model, &feats, &cfg).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            schedule: ScheduleConfig {
                total_epochs: 6,
                warmup_epochs: 2,
                ..ScheduleConfig::default()
            },
            batch_size: 3,
            ..TrainConfig::default()
        };
        let (mut a, feats) = setup(5, 0.05);
        let mut b = a.clone();
        let ta = train(&mut a, &feats, &cfg).unwrap();
        let tb = train(&mut b, &feats, &cfg).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a, b);
        assert!(ta.iter().all(|r| r.total.is_finite()));
        let mut csv = Vec::new();
        write_trace_csv(&ta, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 7);
    }

    #[test]
    fn parallel_eval_matches_serial_ranks() {
        let (model, feats) = setup(6, 0.05);
        let report = evaluate(&model, &feats, 1).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let serial = pool.install(|| evaluate(&model, &feats, 1)).unwrap();
        assert_eq!(report, serial);
    }
}
