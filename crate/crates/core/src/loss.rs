//! Multi-granularity contrastive objective with auxiliary ID supervision.
//!
//! For a batch of `M` text-vehicle pairs with `N_t` text and `N_v` visual
//! embeddings each, the text-to-image term is the negative log-softmax of
//! every matched `(t_i^j, v_i^k)` similarity against all `v_n^k` in the
//! batch, averaged over `M * N_t * N_v`; the image-to-text term mirrors it
//! with the softmax taken over texts. The contrastive loss is the mean of the
//! two directions. The ID loss is cross-entropy of a linear classifier over
//! vehicle identities applied to every visual embedding, and the total is
//! `lambda1 * L_info + lambda2 * L_id`.
//!
//! Embeddings are unit-normalized upstream, so cosine similarity reduces to
//! a dot product inside the losses. Every function returns exact gradients
//! with respect to its inputs and to `log(tau)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EmbeddingSet, GranularEmbeddings};
use crate::error::{OmgError, Result};

/// Tolerance on `| |v| - 1 |` accepted by the contrastive losses.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Learnable softmax temperature, stored as `log(tau)` so `tau > 0` always.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature {
    pub log_tau: f64,
}

impl Temperature {
    pub const INITIAL_TAU: f64 = 0.07;

    pub fn from_tau(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(OmgError::InvalidArgument(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        Ok(Self { log_tau: tau.ln() })
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self {
            log_tau: Self::INITIAL_TAU.ln(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
            return Err(OmgError::InvalidArgument(format!(
                "loss weights must be non-negative, got {lambda1}, {lambda2}"
            )));
        }
        Ok(Self { lambda1, lambda2 })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IdHeadMode {
    /// One classifier for all visual granularities.
    #[default]
    Shared,
    /// A separate classifier per visual granularity.
    PerGranularity,
}

/// Linear ID classifier(s): each head is a `classes x dim` row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct IdHead {
    classes: usize,
    dim: usize,
    pub heads: Vec<Vec<f64>>,
}

impl IdHead {
    pub fn new(classes: usize, dim: usize, heads: Vec<Vec<f64>>) -> Result<Self> {
        if classes == 0 || dim == 0 || heads.is_empty() {
            return Err(OmgError::InvalidArgument(format!(
                "ID head needs classes, dim and at least one head, got {classes}, {dim}, {}",
                heads.len()
            )));
        }
        if let Some(h) = heads.iter().find(|h| h.len() != classes * dim) {
            return Err(OmgError::Shape(format!(
                "ID head has {} weights, expected {}",
                h.len(),
                classes * dim
            )));
        }
        Ok(Self {
            classes,
            dim,
            heads,
        })
    }

    pub fn zeros(classes: usize, dim: usize, mode: IdHeadMode, n_visual: usize) -> Result<Self> {
        let count = match mode {
            IdHeadMode::Shared => 1,
            IdHeadMode::PerGranularity => n_visual,
        };
        Self::new(classes, dim, vec![vec![0.0; classes * dim]; count])
    }

    pub fn random<R: Rng + ?Sized>(
        classes: usize,
        dim: usize,
        mode: IdHeadMode,
        n_visual: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut head = Self::zeros(classes, dim, mode, n_visual)?;
        for h in &mut head.heads {
            h.iter_mut()
                .for_each(|w| *w = rng.gen_range(-scale..=scale));
        }
        Ok(head)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> IdHeadMode {
        if self.heads.len() == 1 {
            IdHeadMode::Shared
        } else {
            IdHeadMode::PerGranularity
        }
    }

    /// Index of the head used for visual granularity `k`.
    pub fn head_index(&self, k: usize) -> usize {
        if self.heads.len() == 1 {
            0
        } else {
            k
        }
    }

    pub fn logits(&self, k: usize, v: &[f64]) -> Vec<f64> {
        self.heads[self.head_index(k)]
            .chunks_exact(self.dim)
            .map(|row| dot(row, v))
            .collect()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `u . v / (|u| |v|)`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(OmgError::Shape(format!(
            "vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(OmgError::InvalidArgument(
            "cosine similarity of a zero vector".into(),
        ));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Gradients of a contrastive loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrads {
    pub text: EmbeddingSet,
    pub visual: EmbeddingSet,
    pub log_tau: f64,
}

impl ContrastiveGrads {
    fn zeros_like(emb: &GranularEmbeddings) -> Self {
        Self {
            text: EmbeddingSet::zeros(emb.text.items(), emb.text.granularities(), emb.dim()),
            visual: EmbeddingSet::zeros(emb.visual.items(), emb.visual.granularities(), emb.dim()),
            log_tau: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceOutput {
    pub loss: f64,
    pub grads: ContrastiveGrads,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceTotal {
    pub loss: f64,
    pub t2i: f64,
    pub i2t: f64,
    pub grads: ContrastiveGrads,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Direction {
    TextToImage,
    ImageToText,
}

/// One direction of the multi-granularity InfoNCE without input validation.
/// Gradients are accumulated (scaled by `scale`) into `grads`.
pub(crate) fn directional_infonce(
    emb: &GranularEmbeddings,
    temp: Temperature,
    direction: Direction,
    scale: f64,
    grads: &mut ContrastiveGrads,
) -> f64 {
    let (anchors, candidates) = match direction {
        Direction::TextToImage => (&emb.text, &emb.visual),
        Direction::ImageToText => (&emb.visual, &emb.text),
    };
    let m = emb.pairs();
    let n_anchor = anchors.granularities();
    let n_cand = candidates.granularities();
    let inv_tau = (-temp.log_tau).exp();
    let norm = 1.0 / (m * n_anchor * n_cand) as f64;

    let mut total = 0.0;
    let mut logits = vec![0.0; m];
    let mut probs = vec![0.0; m];
    for ja in 0..n_anchor {
        for jc in 0..n_cand {
            for i in 0..m {
                let a = anchors.vector(i, ja);
                for (n, l) in logits.iter_mut().enumerate() {
                    *l = dot(a, candidates.vector(n, jc)) * inv_tau;
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (p, &l) in probs.iter_mut().zip(&logits) {
                    *p = (l - max).exp();
                    sum += *p;
                }
                total += sum.ln() - (logits[i] - max);

                let mut d_log_tau = 0.0;
                for n in 0..m {
                    let p = probs[n] / sum;
                    let d_logit = (p - if n == i { 1.0 } else { 0.0 }) * norm * scale;
                    d_log_tau -= d_logit * logits[n];
                    let d_sim = d_logit * inv_tau;
                    if d_sim == 0.0 {
                        continue;
                    }
                    let c = candidates.vector(n, jc);
                    let (ga, gc) = split_grads(grads, direction, (i, ja), (n, jc));
                    ga.iter_mut().zip(c).for_each(|(g, x)| *g += d_sim * x);
                    gc.iter_mut().zip(a).for_each(|(g, x)| *g += d_sim * x);
                }
                grads.log_tau += d_log_tau;
            }
        }
    }
    total * norm
}

/// Mutable gradient slices for an anchor vector and a candidate vector, which
/// always live in different embedding sets.
fn split_grads(
    grads: &mut ContrastiveGrads,
    direction: Direction,
    anchor: (usize, usize),
    candidate: (usize, usize),
) -> (&mut [f64], &mut [f64]) {
    match direction {
        Direction::TextToImage => (
            grads.text.vector_mut(anchor.0, anchor.1),
            grads.visual.vector_mut(candidate.0, candidate.1),
        ),
        Direction::ImageToText => (
            grads.visual.vector_mut(anchor.0, anchor.1),
            grads.text.vector_mut(candidate.0, candidate.1),
        ),
    }
}

fn validate(emb: &GranularEmbeddings) -> Result<()> {
    emb.check_normalized(NORM_TOLERANCE)
}

fn finite(loss: f64, what: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(OmgError::NonFinite(format!("{what} = {loss}")))
    }
}

fn directional_checked(
    emb: &GranularEmbeddings,
    temp: Temperature,
    direction: Direction,
) -> Result<InfoNceOutput> {
    validate(emb)?;
    let mut grads = ContrastiveGrads::zeros_like(emb);
    let loss = directional_infonce(emb, temp, direction, 1.0, &mut grads);
    Ok(InfoNceOutput {
        loss: finite(loss, "InfoNCE")?,
        grads,
    })
}

/// Text-to-image multi-granularity InfoNCE.
pub fn infonce_t2i(emb: &GranularEmbeddings, temp: Temperature) -> Result<InfoNceOutput> {
    directional_checked(emb, temp, Direction::TextToImage)
}

/// Image-to-text multi-granularity InfoNCE.
pub fn infonce_i2t(emb: &GranularEmbeddings, temp: Temperature) -> Result<InfoNceOutput> {
    directional_checked(emb, temp, Direction::ImageToText)
}

/// Mean of the two directions.
pub fn infonce_total(emb: &GranularEmbeddings, temp: Temperature) -> Result<InfoNceTotal> {
    validate(emb)?;
    let mut grads = ContrastiveGrads::zeros_like(emb);
    let t2i = directional_infonce(emb, temp, Direction::TextToImage, 0.5, &mut grads);
    let i2t = directional_infonce(emb, temp, Direction::ImageToText, 0.5, &mut grads);
    let loss = finite((t2i + i2t) / 2.0, "InfoNCE")?;
    Ok(InfoNceTotal {
        loss,
        t2i,
        i2t,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdLossOutput {
    pub loss: f64,
    pub grad_visual: EmbeddingSet,
    /// Same layout as [`IdHead::heads`].
    pub grad_head: Vec<Vec<f64>>,
}

pub(crate) fn id_loss_scaled(
    visual: &EmbeddingSet,
    labels: &[usize],
    head: &IdHead,
    scale: f64,
    grad_visual: &mut EmbeddingSet,
    grad_head: &mut [Vec<f64>],
) -> Result<f64> {
    let (m, n_v) = (visual.items(), visual.granularities());
    if labels.len() != m {
        return Err(OmgError::Shape(format!(
            "{} labels for {m} vehicles",
            labels.len()
        )));
    }
    if visual.dim() != head.dim() {
        return Err(OmgError::Shape(format!(
            "ID head expects {}-dim embeddings, got {}",
            head.dim(),
            visual.dim()
        )));
    }
    if head.heads.len() != 1 && head.heads.len() != n_v {
        return Err(OmgError::Shape(format!(
            "{} ID heads for {n_v} visual granularities",
            head.heads.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= head.classes()) {
        return Err(OmgError::LabelOutOfRange {
            label,
            classes: head.classes(),
        });
    }
    let norm = 1.0 / (m * n_v) as f64;
    let dim = head.dim();
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        for k in 0..n_v {
            let v = visual.vector(i, k);
            let logits = head.logits(k, v);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            total += sum.ln() - (logits[label] - max);

            let h = head.head_index(k);
            let weights = &head.heads[h];
            let gv = grad_visual.vector_mut(i, k);
            for (c, e) in exps.iter().enumerate() {
                let d_logit = (e / sum - if c == label { 1.0 } else { 0.0 }) * norm * scale;
                let row = &weights[c * dim..(c + 1) * dim];
                gv.iter_mut().zip(row).for_each(|(g, w)| *g += d_logit * w);
                grad_head[h][c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(v)
                    .for_each(|(g, x)| *g += d_logit * x);
            }
        }
    }
    Ok(total * norm)
}

/// Cross-entropy of the ID classifier over all visual granularities.
pub fn id_loss(visual: &EmbeddingSet, labels: &[usize], head: &IdHead) -> Result<IdLossOutput> {
    let mut grad_visual = EmbeddingSet::zeros(visual.items(), visual.granularities(), visual.dim());
    let mut grad_head: Vec<Vec<f64>> = head.heads.iter().map(|h| vec![0.0; h.len()]).collect();
    let loss = id_loss_scaled(visual, labels, head, 1.0, &mut grad_visual, &mut grad_head)?;
    Ok(IdLossOutput {
        loss: finite(loss, "ID loss")?,
        grad_visual,
        grad_head,
    })
}

/// Loss values and gradients of the full objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub total: f64,
    pub info: f64,
    pub info_t2i: f64,
    pub info_i2t: f64,
    pub id: f64,
    pub grad_text: EmbeddingSet,
    pub grad_visual: EmbeddingSet,
    pub grad_log_tau: f64,
    pub grad_id_head: Vec<Vec<f64>>,
}

/// `lambda1 * L_info + lambda2 * L_id` with merged gradients.
pub fn total_loss(
    emb: &GranularEmbeddings,
    labels: &[usize],
    temp: Temperature,
    head: &IdHead,
    weights: LossWeights,
) -> Result<LossBundle> {
    validate(emb)?;
    let mut grads = ContrastiveGrads::zeros_like(emb);
    let half = 0.5 * weights.lambda1;
    let t2i = directional_infonce(emb, temp, Direction::TextToImage, half, &mut grads);
    let i2t = directional_infonce(emb, temp, Direction::ImageToText, half, &mut grads);
    let info = (t2i + i2t) / 2.0;
    let mut grad_id_head: Vec<Vec<f64>> = head.heads.iter().map(|h| vec![0.0; h.len()]).collect();
    let id = id_loss_scaled(
        &emb.visual,
        labels,
        head,
        weights.lambda2,
        &mut grads.visual,
        &mut grad_id_head,
    )?;
    let total = finite(weights.lambda1 * info + weights.lambda2 * id, "total loss")?;
    Ok(LossBundle {
        total,
        info,
        info_t2i: t2i,
        info_i2t: i2t,
        id,
        grad_text: grads.text,
        grad_visual: grads.visual,
        grad_log_tau: grads.log_tau,
        grad_id_head,
    })
}
