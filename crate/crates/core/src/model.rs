//! The full dual-encoder: raw features per granularity, the shared text
//! encoder, independent visual encoders, temperature and ID head.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{featurize_raster, EncoderGrads, EncoderOutput, EncoderParams};
use crate::error::{OmgError, Result};
use crate::geometry::{
    expand_context_box, filter_overlapping_boxes, middle_frame_index, uniform_indices,
};
use crate::loss::{IdHead, IdHeadMode, Temperature};
use crate::motion::{build_motion_map, MotionConfig, MotionMap, MOTION_CHANNELS};
use crate::retrieval::mean_embedding;
use crate::scene::FrameSource;
use crate::tensor_file::{read_sections, write_sections, Tensor};
use crate::text::{featurize_text, Lexicon, QueryTexts};
use crate::track::Track;

/// Which granularities take part. Global text and the target crop are
/// always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GranularityConfig {
    pub context: bool,
    pub motion: bool,
    pub local: bool,
    pub prompt: bool,
}

impl Default for GranularityConfig {
    fn default() -> Self {
        Self {
            context: true,
            motion: true,
            local: true,
            prompt: true,
        }
    }
}

impl GranularityConfig {
    pub fn global_only() -> Self {
        Self {
            local: false,
            prompt: false,
            ..Self::default()
        }
    }

    pub fn n_text(&self) -> usize {
        1 + 3 * usize::from(self.local) + usize::from(self.prompt)
    }

    pub fn n_visual(&self) -> usize {
        1 + usize::from(self.context) + usize::from(self.motion)
    }

    /// Text inputs in granularity order: global, locals, prompt.
    pub fn select_texts(&self, q: &QueryTexts) -> Vec<String> {
        let mut out = vec![q.global_text.clone()];
        if self.local {
            out.extend(q.local_texts.iter().cloned());
        }
        if self.prompt {
            out.push(q.prompt_text.clone());
        }
        out
    }

    /// Checkpoint section names of the visual encoders, in order.
    pub fn visual_names(&self) -> Vec<&'static str> {
        let mut names = vec!["vis_target"];
        if self.context {
            names.push("vis_context");
        }
        if self.motion {
            names.push("vis_motion");
        }
        names
    }
}

/// Raw feature settings shared by training and inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub text_dim: usize,
    /// Cells per side of the pooling grid for every raster.
    pub grid: usize,
    /// Target and context crops are resized to this square size.
    pub crop_size: usize,
    pub motion: MotionConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            text_dim: 1024,
            grid: 8,
            crop_size: 32,
            motion: MotionConfig::default(),
        }
    }
}

impl FeatureConfig {
    pub fn crop_input_dim(&self) -> usize {
        3 * 2 * self.grid * self.grid
    }

    pub fn motion_input_dim(&self) -> usize {
        MOTION_CHANNELS * 2 * self.grid * self.grid
    }
}

/// Precomputed raw inputs of one track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackFeatures {
    pub id: String,
    pub label: usize,
    pub queries: QueryTexts,
    /// One vector per text granularity.
    pub text: Vec<Vec<f64>>,
    /// Paraphrased alternatives to `text`, drawn from during training.
    pub text_variants: Vec<Vec<Vec<f64>>>,
    /// Per frame: target crop features, then context crop features if enabled.
    pub frames: Vec<Vec<Vec<f64>>>,
    pub motion: Option<Vec<f64>>,
}

impl TrackFeatures {
    /// Text inputs of variant `v`: 0 is the original, `i > 0` the paraphrase `i - 1`.
    pub fn text_inputs(&self, v: usize) -> &[Vec<f64>] {
        match v {
            0 => &self.text,
            _ => &self.text_variants[v - 1],
        }
    }

    /// Visual inputs for one frame in granularity order.
    pub fn visual(&self, frame: usize) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.frames[frame].iter().map(Vec::as_slice).collect();
        if let Some(m) = &self.motion {
            out.push(m);
        }
        out
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

fn crop_features(
    source: &dyn FrameSource,
    track: &Track,
    frame: usize,
    cfg: &FeatureConfig,
    granularity: &GranularityConfig,
) -> Result<Vec<Vec<f64>>> {
    let entry = &track.frames()[frame];
    let dim = cfg.crop_input_dim();
    let target = source
        .region(track, entry, &entry.bbox)?
        .resize_bilinear(cfg.crop_size, cfg.crop_size)?;
    let mut out = vec![featurize_raster(&target, dim)?];
    if granularity.context {
        let region = expand_context_box(&entry.bbox, track.frame_size())?;
        let context = source
            .region(track, entry, &region)?
            .resize_bilinear(cfg.crop_size, cfg.crop_size)?;
        out.push(featurize_raster(&context, dim)?);
    }
    Ok(out)
}

/// Motion map of a track built from the source's target crops.
pub fn track_motion_map(
    source: &dyn FrameSource,
    track: &Track,
    motion: &MotionConfig,
) -> Result<MotionMap> {
    let kept = filter_overlapping_boxes(track.frames(), motion.overlap_threshold)?;
    let crops = kept
        .iter()
        .map(|f| source.region(track, f, &f.bbox))
        .collect::<Result<Vec<_>>>()?;
    build_motion_map(track, &crops, motion)
}

/// Raw features for every track and frame. Tracks are processed in
/// parallel; the result does not depend on the thread count.
pub fn extract_features(
    tracks: &[Track],
    source: &dyn FrameSource,
    lexicon: &Lexicon,
    cfg: &FeatureConfig,
    granularity: &GranularityConfig,
) -> Result<Vec<TrackFeatures>> {
    tracks
        .par_iter()
        .map(|track| {
            let queries = QueryTexts::from_sentences(track.sentences(), lexicon);
            let text = granularity
                .select_texts(&queries)
                .iter()
                .map(|t| featurize_text(t, cfg.text_dim))
                .collect::<Result<Vec<_>>>()?;
            let frames = (0..track.len())
                .map(|f| crop_features(source, track, f, cfg, granularity))
                .collect::<Result<Vec<_>>>()?;
            let motion = if granularity.motion {
                let map = track_motion_map(source, track, &cfg.motion)?;
                Some(featurize_raster(map.raster(), cfg.motion_input_dim())?)
            } else {
                None
            };
            Ok(TrackFeatures {
                id: track.id().to_owned(),
                label: track.class_id(),
                queries,
                text,
                text_variants: Vec::new(),
                frames,
                motion,
            })
        })
        .collect()
}

/// Featurizes paraphrased sentence triples as extra text variants, keyed by
/// track id. Tracks without an entry keep none.
pub fn attach_augmentations(
    features: &mut [TrackFeatures],
    augmentations: &HashMap<String, Vec<[String; 3]>>,
    lexicon: &Lexicon,
    cfg: &FeatureConfig,
    granularity: &GranularityConfig,
) -> Result<()> {
    for f in features.iter_mut() {
        let Some(triples) = augmentations.get(&f.id) else {
            continue;
        };
        f.text_variants = triples
            .iter()
            .map(|s| {
                granularity
                    .select_texts(&QueryTexts::from_sentences(s, lexicon))
                    .iter()
                    .map(|t| featurize_text(t, cfg.text_dim))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(())
}

/// Initialization settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub dim: usize,
    /// Uniform weight range is `scale / sqrt(input_dim)`.
    pub text_scale: f64,
    pub visual_scale: f64,
    pub id_scale: f64,
    pub id_mode_per_granularity: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            text_scale: 1.0,
            visual_scale: 1.0,
            id_scale: 0.01,
            id_mode_per_granularity: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmgModel {
    pub features: FeatureConfig,
    pub granularity: GranularityConfig,
    /// Shared by every text granularity.
    pub text: EncoderParams,
    /// One per visual granularity, never shared.
    pub visual: Vec<EncoderParams>,
    pub temperature: Temperature,
    pub id_head: IdHead,
}

/// Gradients for every trainable parameter of [`OmgModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub text: EncoderGrads,
    pub visual: Vec<EncoderGrads>,
    pub id_head: Vec<Vec<f64>>,
    pub log_tau: f64,
}

impl ModelGrads {
    pub fn zeros_like(model: &OmgModel) -> Self {
        Self {
            text: EncoderGrads::zeros_like(&model.text),
            visual: model.visual.iter().map(EncoderGrads::zeros_like).collect(),
            id_head: model
                .id_head
                .heads
                .iter()
                .map(|h| vec![0.0; h.len()])
                .collect(),
            log_tau: 0.0,
        }
    }
}

impl OmgModel {
    pub fn new<R: Rng + ?Sized>(
        features: FeatureConfig,
        granularity: GranularityConfig,
        init: &InitConfig,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let text = EncoderParams::random(init.dim, features.text_dim, init.text_scale, rng)?;
        let mut visual = vec![EncoderParams::random(
            init.dim,
            features.crop_input_dim(),
            init.visual_scale,
            rng,
        )?];
        if granularity.context {
            visual.push(EncoderParams::random(
                init.dim,
                features.crop_input_dim(),
                init.visual_scale,
                rng,
            )?);
        }
        if granularity.motion {
            visual.push(EncoderParams::random(
                init.dim,
                features.motion_input_dim(),
                init.visual_scale,
                rng,
            )?);
        }
        let mode = if init.id_mode_per_granularity {
            IdHeadMode::PerGranularity
        } else {
            IdHeadMode::Shared
        };
        let id_head = IdHead::random(
            classes,
            init.dim,
            mode,
            granularity.n_visual(),
            init.id_scale,
            rng,
        )?;
        Ok(Self {
            features,
            granularity,
            text,
            visual,
            temperature: Temperature::default(),
            id_head,
        })
    }

    /// [`OmgModel::new`] with a ChaCha8 generator seeded by `seed`.
    pub fn seeded(
        features: FeatureConfig,
        granularity: GranularityConfig,
        init: &InitConfig,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::new(
            features,
            granularity,
            init,
            classes,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    pub fn dim(&self) -> usize {
        self.text.dim()
    }

    pub fn n_text(&self) -> usize {
        self.granularity.n_text()
    }

    pub fn n_visual(&self) -> usize {
        self.visual.len()
    }

    pub fn text_forward(&self, track: &TrackFeatures) -> Result<Vec<EncoderOutput>> {
        self.text_forward_variant(track, 0)
    }

    pub fn text_forward_variant(
        &self,
        track: &TrackFeatures,
        variant: usize,
    ) -> Result<Vec<EncoderOutput>> {
        track
            .text_inputs(variant)
            .iter()
            .map(|x| self.text.forward(x))
            .collect()
    }

    pub fn visual_forward(
        &self,
        track: &TrackFeatures,
        frame: usize,
    ) -> Result<Vec<EncoderOutput>> {
        track
            .visual(frame)
            .into_iter()
            .zip(&self.visual)
            .map(|(x, enc)| enc.forward(x))
            .collect()
    }

    pub fn embed_text(&self, track: &TrackFeatures) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .text_forward(track)?
            .into_iter()
            .map(|o| o.embedding)
            .collect())
    }

    /// Visual embeddings from the middle frame.
    pub fn embed_visual(&self, track: &TrackFeatures) -> Result<Vec<Vec<f64>>> {
        let mid = middle_frame_index(track.num_frames())?;
        Ok(self
            .visual_forward(track, mid)?
            .into_iter()
            .map(|o| o.embedding)
            .collect())
    }

    /// Visual embeddings averaged over `k` uniformly sampled frames and
    /// renormalized; `k = 1` is the middle frame.
    pub fn multi_frame_embedding(&self, track: &TrackFeatures, k: usize) -> Result<Vec<Vec<f64>>> {
        let per_frame = uniform_indices(track.num_frames(), k)?
            .into_iter()
            .map(|f| self.visual_forward(track, f))
            .collect::<Result<Vec<_>>>()?;
        if let [single] = per_frame.as_slice() {
            return Ok(single.iter().map(|o| o.embedding.clone()).collect());
        }
        (0..self.n_visual())
            .map(|g| {
                let vectors: Vec<Vec<f64>> =
                    per_frame.iter().map(|o| o[g].embedding.clone()).collect();
                mean_embedding(&vectors)
            })
            .collect()
    }

    pub fn apply_sgd(&mut self, grads: &ModelGrads, lr: f64) {
        sgd(&mut self.text.weight, &grads.text.weight, lr);
        sgd(&mut self.text.bias, &grads.text.bias, lr);
        for (enc, g) in self.visual.iter_mut().zip(&grads.visual) {
            sgd(&mut enc.weight, &g.weight, lr);
            sgd(&mut enc.bias, &g.bias, lr);
        }
        for (h, g) in self.id_head.heads.iter_mut().zip(&grads.id_head) {
            sgd(h, g, lr);
        }
        self.temperature.log_tau -= lr * grads.log_tau;
    }

    /// Named OMGT sections: encoders as `[dim, input_dim + 1]` with the bias
    /// in the last column, the ID head as `[heads, classes, dim]`, then
    /// `log_tau` and the granularity switches.
    pub fn to_sections(&self) -> Result<Vec<(String, Tensor)>> {
        let mut sections = vec![("text".to_owned(), encoder_tensor(&self.text)?)];
        for (name, enc) in self
            .granularity
            .visual_names()
            .into_iter()
            .zip(&self.visual)
        {
            sections.push((name.to_owned(), encoder_tensor(enc)?));
        }
        let head_data: Vec<f64> = self.id_head.heads.concat();
        sections.push((
            "id_head".to_owned(),
            Tensor::from_f64(
                vec![
                    self.id_head.heads.len(),
                    self.id_head.classes(),
                    self.id_head.dim(),
                ],
                &head_data,
            )?,
        ));
        sections.push((
            "log_tau".to_owned(),
            Tensor::from_f64(vec![1], &[self.temperature.log_tau])?,
        ));
        let g = self.granularity;
        let flags = [g.context, g.motion, g.local, g.prompt].map(|b| f64::from(u8::from(b)));
        sections.push(("granularity".to_owned(), Tensor::from_f64(vec![4], &flags)?));
        Ok(sections)
    }

    pub fn save<W: Write>(&self, out: &mut W) -> Result<()> {
        write_sections(out, &self.to_sections()?)
    }

    /// Rebuilds a model from checkpoint sections. Values pass through f32.
    pub fn from_sections(sections: &[(String, Tensor)], features: FeatureConfig) -> Result<Self> {
        let find = |name: &str| sections.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let need = |name: &str| {
            find(name)
                .ok_or_else(|| OmgError::Format(format!("checkpoint has no {name:?} section")))
        };
        let flags = need("granularity")?.to_f64();
        if flags.len() != 4 {
            return Err(OmgError::Format(
                "granularity section must hold 4 flags".into(),
            ));
        }
        let granularity = GranularityConfig {
            context: flags[0] != 0.0,
            motion: flags[1] != 0.0,
            local: flags[2] != 0.0,
            prompt: flags[3] != 0.0,
        };
        let text = encoder_from_tensor(need("text")?)?;
        let visual = granularity
            .visual_names()
            .into_iter()
            .map(|n| encoder_from_tensor(need(n)?))
            .collect::<Result<Vec<_>>>()?;
        if text.input_dim() != features.text_dim
            || visual[0].input_dim() != features.crop_input_dim()
            || (granularity.motion
                && visual.last().map(EncoderParams::input_dim) != Some(features.motion_input_dim()))
        {
            return Err(OmgError::Format(
                "checkpoint encoder sizes do not match the feature settings".into(),
            ));
        }
        let head = need("id_head")?;
        let [heads, classes, dim] = head.dims() else {
            return Err(OmgError::Format(format!(
                "id_head has dims {:?}",
                head.dims()
            )));
        };
        let data = head.to_f64();
        let id_head = IdHead::new(
            *classes,
            *dim,
            data.chunks(classes * dim).map(<[f64]>::to_vec).collect(),
        )?;
        if id_head.heads.len() != *heads {
            return Err(OmgError::Format(
                "id_head data does not match its dims".into(),
            ));
        }
        let log_tau = need("log_tau")?.to_f64();
        let temperature = Temperature {
            log_tau: *log_tau
                .first()
                .ok_or_else(|| OmgError::Format("empty log_tau section".into()))?,
        };
        Ok(Self {
            features,
            granularity,
            text,
            visual,
            temperature,
            id_head,
        })
    }

    pub fn load<R: Read>(input: &mut R, features: FeatureConfig) -> Result<Self> {
        Self::from_sections(&read_sections(input)?, features)
    }
}

fn sgd(params: &mut [f64], grads: &[f64], lr: f64) {
    params.iter_mut().zip(grads).for_each(|(p, g)| *p -= lr * g);
}

fn encoder_tensor(enc: &EncoderParams) -> Result<Tensor> {
    let (d, n) = (enc.dim(), enc.input_dim());
    let mut data = Vec::with_capacity(d * (n + 1));
    for r in 0..d {
        data.extend_from_slice(&enc.weight[r * n..(r + 1) * n]);
        data.push(enc.bias[r]);
    }
    Tensor::from_f64(vec![d, n + 1], &data)
}

fn encoder_from_tensor(t: &Tensor) -> Result<EncoderParams> {
    let [d, cols] = t.dims() else {
        return Err(OmgError::Format(format!(
            "encoder tensor has dims {:?}",
            t.dims()
        )));
    };
    let (d, n) = (*d, cols.saturating_sub(1));
    let data = t.to_f64();
    let mut weight = Vec::with_capacity(d * n);
    let mut bias = Vec::with_capacity(d);
    for row in data.chunks_exact(n + 1) {
        weight.extend_from_slice(&row[..n]);
        bias.push(row[n]);
    }
    EncoderParams::new(d, n, weight, bias)
}
