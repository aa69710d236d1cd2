//! Trainable linear encoders over frozen, deterministic raw features.
//!
//! Every granularity is embedded as `y = normalize(W x + b)`. The five text
//! granularities share one [`EncoderParams`]; each visual granularity owns its
//! own. Raw visual features are grid-pooled raster statistics and raw text
//! features come from [`crate::text::featurize_text`].

use rand::Rng;

use crate::error::{OmgError, Result};
use crate::raster::Raster;

/// Weight (`dim x input_dim`, row-major) and bias of one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    dim: usize,
    input_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Output of a forward pass, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub embedding: Vec<f64>,
    /// `|W x + b|` before normalization.
    pub pre_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl EncoderGrads {
    pub fn zeros(dim: usize, input_dim: usize) -> Self {
        Self {
            weight: vec![0.0; dim * input_dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn zeros_like(params: &EncoderParams) -> Self {
        Self::zeros(params.dim, params.input_dim)
    }

    pub fn add_assign(&mut self, other: &EncoderGrads) {
        self.weight
            .iter_mut()
            .zip(&other.weight)
            .for_each(|(a, b)| *a += b);
        self.bias
            .iter_mut()
            .zip(&other.bias)
            .for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, factor: f64) {
        self.weight.iter_mut().for_each(|a| *a *= factor);
        self.bias.iter_mut().for_each(|a| *a *= factor);
    }
}

impl EncoderParams {
    pub fn new(dim: usize, input_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if dim == 0 || input_dim == 0 {
            return Err(OmgError::InvalidArgument(format!(
                "encoder needs positive dims, got {dim}x{input_dim}"
            )));
        }
        if weight.len() != dim * input_dim || bias.len() != dim {
            return Err(OmgError::Shape(format!(
                "encoder {dim}x{input_dim} got {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(OmgError::NonFinite("encoder parameters".into()));
        }
        Ok(Self {
            dim,
            input_dim,
            weight,
            bias,
        })
    }

    pub fn zeros(dim: usize, input_dim: usize) -> Result<Self> {
        Self::new(dim, input_dim, vec![0.0; dim * input_dim], vec![0.0; dim])
    }

    /// Weights uniform in `[-scale, scale] / sqrt(input_dim)`, zero bias.
    pub fn random<R: Rng + ?Sized>(
        dim: usize,
        input_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = scale / (input_dim as f64).sqrt();
        let weight = (0..dim * input_dim)
            .map(|_| rng.gen_range(-1.0..=1.0) * bound)
            .collect();
        Self::new(dim, input_dim, weight, vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(OmgError::Shape(format!(
                "encoder expects {} inputs, got {}",
                self.input_dim,
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<EncoderOutput> {
        self.check_input(x)?;
        let nz = nonzeros(x);
        let mut z = self.bias.clone();
        for (zr, row) in z.iter_mut().zip(self.weight.chunks_exact(self.input_dim)) {
            *zr += match &nz {
                Some(idx) => idx.iter().map(|&j| row[j] * x[j]).sum::<f64>(),
                None => row.iter().zip(x).map(|(w, xj)| w * xj).sum::<f64>(),
            };
        }
        let pre_norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if pre_norm == 0.0 || !pre_norm.is_finite() {
            return Err(OmgError::DegenerateEmbedding(format!(
                "|Wx + b| = {pre_norm}, cannot normalize"
            )));
        }
        z.iter_mut().for_each(|v| *v /= pre_norm);
        Ok(EncoderOutput {
            embedding: z,
            pre_norm,
        })
    }

    /// Gradient at `z = W x + b` given the upstream gradient on the
    /// normalized output: `(g - (g . y) y) / |z|`.
    pub fn pre_activation_grad(output: &EncoderOutput, upstream: &[f64]) -> Vec<f64> {
        let y = &output.embedding;
        let gy: f64 = upstream.iter().zip(y).map(|(g, y)| g * y).sum();
        upstream
            .iter()
            .zip(y)
            .map(|(g, y)| (g - gy * y) / output.pre_norm)
            .collect()
    }

    /// Adds `dz x^T` and `dz` into `grads`, skipping zero inputs.
    pub fn accumulate_backward(
        &self,
        x: &[f64],
        output: &EncoderOutput,
        upstream: &[f64],
        grads: &mut EncoderGrads,
    ) {
        let dz = Self::pre_activation_grad(output, upstream);
        let nz = nonzeros(x);
        for (row, dzr) in grads.weight.chunks_exact_mut(self.input_dim).zip(&dz) {
            match &nz {
                Some(idx) => idx.iter().for_each(|&j| row[j] += dzr * x[j]),
                None => row.iter_mut().zip(x).for_each(|(g, xj)| *g += dzr * xj),
            }
        }
        grads.bias.iter_mut().zip(&dz).for_each(|(b, d)| *b += d);
    }

    pub fn input_grad(&self, output: &EncoderOutput, upstream: &[f64]) -> Vec<f64> {
        let dz = Self::pre_activation_grad(output, upstream);
        let mut dx = vec![0.0; self.input_dim];
        for (r, dzr) in dz.iter().enumerate() {
            let row = &self.weight[r * self.input_dim..(r + 1) * self.input_dim];
            dx.iter_mut().zip(row).for_each(|(d, w)| *d += dzr * w);
        }
        dx
    }
}

/// Indices of the nonzero entries when the input is mostly zeros.
fn nonzeros(x: &[f64]) -> Option<Vec<usize>> {
    let idx: Vec<usize> = (0..x.len()).filter(|&j| x[j] != 0.0).collect();
    (idx.len() * 4 < x.len()).then_some(idx)
}

/// `normalize(W x + b)`.
pub fn encode(params: &EncoderParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(params.forward(x)?.embedding)
}

/// Exact gradients `(dW, db, dx)` of `upstream . encode(params, x)`.
pub fn encode_backward(
    params: &EncoderParams,
    x: &[f64],
    upstream: &[f64],
) -> Result<(EncoderGrads, Vec<f64>)> {
    if upstream.len() != params.dim {
        return Err(OmgError::Shape(format!(
            "upstream gradient has {} entries for a {}-dim embedding",
            upstream.len(),
            params.dim
        )));
    }
    let output = params.forward(x)?;
    let mut grads = EncoderGrads::zeros_like(params);
    params.accumulate_backward(x, &output, upstream, &mut grads);
    let dx = params.input_grad(&output, upstream);
    Ok((grads, dx))
}

/// Grid size `g` with `channels * g^2 * 2 = input_dim`.
pub fn raster_grid_size(channels: usize, input_dim: usize) -> Result<usize> {
    let cells = if channels == 0 {
        0
    } else {
        input_dim / (2 * channels)
    };
    let g = (cells as f64).sqrt().round() as usize;
    if channels == 0 || g == 0 || 2 * channels * g * g != input_dim {
        return Err(OmgError::Shape(format!(
            "{input_dim} features cannot be split into mean/std over a square grid of {channels} channels"
        )));
    }
    Ok(g)
}

/// Per-channel mean and standard deviation over a `g x g` grid of cells.
/// Layout: for each channel, `g^2` means (row-major cells) then `g^2` stds.
pub fn featurize_raster(raster: &Raster, input_dim: usize) -> Result<Vec<f64>> {
    if raster.is_empty() {
        return Err(OmgError::Shape("cannot featurize an empty raster".into()));
    }
    let g = raster_grid_size(raster.channels(), input_dim)?;
    let (w, h) = (raster.width(), raster.height());
    let mut out = vec![0.0; input_dim];
    for c in 0..raster.channels() {
        let plane = raster.plane(c);
        let base = c * 2 * g * g;
        for gy in 0..g {
            let (y0, y1) = (gy * h / g, (gy + 1) * h / g);
            for gx in 0..g {
                let (x0, x1) = (gx * w / g, (gx + 1) * w / g);
                let n = (y1 - y0) * (x1 - x0);
                if n == 0 {
                    continue;
                }
                let mut sum = 0.0f64;
                for y in y0..y1 {
                    sum += plane[y * w + x0..y * w + x1]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>();
                }
                let mean = sum / n as f64;
                let mut var = 0.0f64;
                for y in y0..y1 {
                    var += plane[y * w + x0..y * w + x1]
                        .iter()
                        .map(|&v| (v as f64 - mean).powi(2))
                        .sum::<f64>();
                }
                out[base + gy * g + gx] = mean;
                out[base + g * g + gy * g + gx] = (var / n as f64).sqrt();
            }
        }
    }
    Ok(out)
}

/// `items x granularities` vectors of one dimension, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    items: usize,
    granularities: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingSet {
    pub fn zeros(items: usize, granularities: usize, dim: usize) -> Self {
        Self {
            items,
            granularities,
            dim,
            data: vec![0.0; items * granularities * dim],
        }
    }

    /// Builds from nested `[item][granularity] -> vector`.
    pub fn from_nested(vectors: &[Vec<Vec<f64>>]) -> Result<Self> {
        let items = vectors.len();
        let granularities = vectors.first().map_or(0, Vec::len);
        let dim = vectors.first().and_then(|v| v.first()).map_or(0, Vec::len);
        if items == 0 || granularities == 0 || dim == 0 {
            return Err(OmgError::Shape("embedding set must be non-empty".into()));
        }
        let mut data = Vec::with_capacity(items * granularities * dim);
        for (i, per_item) in vectors.iter().enumerate() {
            if per_item.len() != granularities {
                return Err(OmgError::Shape(format!(
                    "item {i} has {} granularities, expected {granularities}",
                    per_item.len()
                )));
            }
            for v in per_item {
                if v.len() != dim {
                    return Err(OmgError::Shape(format!(
                        "item {i} has a {}-dim vector, expected {dim}",
                        v.len()
                    )));
                }
                data.extend_from_slice(v);
            }
        }
        Ok(Self {
            items,
            granularities,
            dim,
            data,
        })
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn granularities(&self) -> usize {
        self.granularities
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn vector(&self, item: usize, granularity: usize) -> &[f64] {
        let off = (item * self.granularities + granularity) * self.dim;
        &self.data[off..off + self.dim]
    }

    #[inline]
    pub fn vector_mut(&mut self, item: usize, granularity: usize) -> &mut [f64] {
        let off = (item * self.granularities + granularity) * self.dim;
        &mut self.data[off..off + self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Largest `| |v| - 1 |` over all vectors.
    pub fn max_norm_deviation(&self) -> f64 {
        self.data
            .chunks_exact(self.dim)
            .map(|v| (v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Same vectors with the items reordered: `out[i] = self[order[i]]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut out = Self::zeros(self.items, self.granularities, self.dim);
        for (i, &src) in order.iter().enumerate() {
            for j in 0..self.granularities {
                out.vector_mut(i, j).copy_from_slice(self.vector(src, j));
            }
        }
        out
    }
}

/// Text and visual embeddings of a batch of `M` pairs: `M x N_t` textual and
/// `M x N_v` visual vectors of a shared dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GranularEmbeddings {
    pub text: EmbeddingSet,
    pub visual: EmbeddingSet,
}

impl GranularEmbeddings {
    pub fn new(text: EmbeddingSet, visual: EmbeddingSet) -> Result<Self> {
        if text.items != visual.items || text.dim != visual.dim {
            return Err(OmgError::Shape(format!(
                "text {}x{}x{} and visual {}x{}x{} embeddings disagree",
                text.items,
                text.granularities,
                text.dim,
                visual.items,
                visual.granularities,
                visual.dim
            )));
        }
        Ok(Self { text, visual })
    }

    pub fn pairs(&self) -> usize {
        self.text.items
    }

    pub fn dim(&self) -> usize {
        self.text.dim
    }

    pub fn check_normalized(&self, tolerance: f64) -> Result<()> {
        for set in [&self.text, &self.visual] {
            for v in set.data.chunks_exact(set.dim) {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > tolerance || !norm.is_finite() {
                    return Err(OmgError::NotNormalized { norm });
                }
            }
        }
        Ok(())
    }
}
