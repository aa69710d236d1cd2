//! Similarity fusion over granularity pairs, ranking and retrieval metrics.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{OmgError, Result};
use crate::loss::dot;

/// `queries x gallery x pairs` similarities, one slice per text/visual
/// granularity pair (pair index `j * N_v + k`).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTensor {
    queries: usize,
    gallery: usize,
    pairs: usize,
    values: Vec<f64>,
}

impl SimilarityTensor {
    pub fn new(queries: usize, gallery: usize, pairs: usize, values: Vec<f64>) -> Result<Self> {
        if pairs == 0 {
            return Err(OmgError::Shape(
                "similarity tensor has no granularity pairs".into(),
            ));
        }
        if values.len() != queries * gallery * pairs {
            return Err(OmgError::Shape(format!(
                "{queries}x{gallery}x{pairs} tensor got {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(OmgError::NonFinite("similarity tensor".into()));
        }
        Ok(Self {
            queries,
            gallery,
            pairs,
            values,
        })
    }

    /// Dot products of every query text granularity with every gallery visual
    /// granularity. `queries[q][j]` and `gallery[g][k]` are unit vectors.
    pub fn from_embeddings(queries: &[Vec<Vec<f64>>], gallery: &[Vec<Vec<f64>>]) -> Result<Self> {
        let n_t = queries.first().map_or(0, Vec::len);
        let n_v = gallery.first().map_or(0, Vec::len);
        if queries.iter().any(|q| q.len() != n_t) || gallery.iter().any(|g| g.len() != n_v) {
            return Err(OmgError::Shape("ragged granularity counts".into()));
        }
        let mut values = Vec::with_capacity(queries.len() * gallery.len() * n_t * n_v);
        for q in queries {
            for g in gallery {
                for t in q {
                    for v in g {
                        if t.len() != v.len() {
                            return Err(OmgError::Shape(format!(
                                "text dim {} vs visual dim {}",
                                t.len(),
                                v.len()
                            )));
                        }
                        values.push(dot(t, v));
                    }
                }
            }
        }
        Self::new(queries.len(), gallery.len(), n_t * n_v, values)
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn gallery(&self) -> usize {
        self.gallery
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, q: usize, g: usize, p: usize) -> f64 {
        self.values[(q * self.gallery + g) * self.pairs + p]
    }
}

/// Dense `rows x cols` score matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(OmgError::Shape(format!(
                "{rows}x{cols} matrix got {} values",
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }
}

/// Arithmetic mean over the granularity-pair axis.
pub fn fuse_similarities(tensor: &SimilarityTensor) -> ScoreMatrix {
    let pairs = tensor.pairs as f64;
    let values = tensor
        .values
        .chunks_exact(tensor.pairs)
        .map(|slice| slice.iter().sum::<f64>() / pairs)
        .collect();
    ScoreMatrix {
        rows: tensor.queries,
        cols: tensor.gallery,
        values,
    }
}

/// Weighted fusion; `weights` are normalized to sum to one.
pub fn fuse_weighted(tensor: &SimilarityTensor, weights: &[f64]) -> Result<ScoreMatrix> {
    if weights.len() != tensor.pairs {
        return Err(OmgError::Shape(format!(
            "{} fusion weights for {} pairs",
            weights.len(),
            tensor.pairs
        )));
    }
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 || weights.iter().any(|w| *w < 0.0) {
        return Err(OmgError::InvalidArgument(
            "fusion weights must be non-negative with a positive sum".into(),
        ));
    }
    let values = tensor
        .values
        .chunks_exact(tensor.pairs)
        .map(|slice| slice.iter().zip(weights).map(|(s, w)| s * w).sum::<f64>() / total)
        .collect();
    ScoreMatrix::new(tensor.queries, tensor.gallery, values)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QueryRanking {
    /// Gallery indices by descending score, ties by ascending index.
    pub order: Vec<usize>,
    /// 1-based position of the true match.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedResult {
    pub gallery_ids: Vec<String>,
    pub queries: Vec<QueryRanking>,
}

impl RankedResult {
    pub fn ranks(&self) -> Vec<usize> {
        self.queries.iter().map(|q| q.rank).collect()
    }
}

/// Sorts each query's gallery by descending score (ties by gallery index)
/// and locates the true match. Queries are ranked in parallel; the result
/// is identical to a serial pass.
pub fn rank_queries(
    fused: &ScoreMatrix,
    gallery_ids: &[String],
    truth: &[String],
) -> Result<RankedResult> {
    if gallery_ids.len() != fused.cols || truth.len() != fused.rows {
        return Err(OmgError::Shape(format!(
            "{}x{} scores for {} queries and {} gallery ids",
            fused.rows,
            fused.cols,
            truth.len(),
            gallery_ids.len()
        )));
    }
    let truth_idx = truth
        .iter()
        .map(|t| {
            gallery_ids
                .iter()
                .position(|g| g == t)
                .ok_or_else(|| OmgError::UnknownTruthId(t.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let queries = truth_idx
        .par_iter()
        .enumerate()
        .map(|(q, &target)| {
            let row = fused.row(q);
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let rank = order.iter().position(|&g| g == target).map_or(0, |p| p + 1);
            QueryRanking { order, rank }
        })
        .collect();
    Ok(RankedResult {
        gallery_ids: gallery_ids.to_vec(),
        queries,
    })
}

/// Mean reciprocal rank of the true match.
pub fn mrr(results: &RankedResult) -> Result<f64> {
    mrr_from_ranks(&results.ranks())
}

pub fn mrr_from_ranks(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() || ranks.contains(&0) {
        return Err(OmgError::InvalidArgument(
            "MRR needs at least one valid 1-based rank".into(),
        ));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Fraction of queries whose true match is within the top `k`.
pub fn recall_at_k(results: &RankedResult, k: usize) -> Result<f64> {
    recall_from_ranks(&results.ranks(), k)
}

pub fn recall_from_ranks(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(OmgError::InvalidArgument(
            "recall needs at least one query".into(),
        ));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Renormalized mean of unit embeddings.
pub fn mean_embedding(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| OmgError::InvalidArgument("no embeddings to average".into()))?;
    let mut mean = vec![0.0; first.len()];
    for v in vectors {
        if v.len() != mean.len() {
            return Err(OmgError::Shape("embeddings of different dimensions".into()));
        }
        mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
    }
    let norm = dot(&mean, &mean).sqrt();
    if norm <= 1e-12 * vectors.len() as f64 {
        return Err(OmgError::DegenerateEmbedding(format!(
            "mean of {} embeddings has norm {norm}",
            vectors.len()
        )));
    }
    mean.iter_mut().for_each(|m| *m /= norm);
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("g{i}")).collect()
    }

    #[test]
    fn fusion_examples() {
        let s = [0.1, -0.5, 0.7, 0.2];
        let t = SimilarityTensor::new(2, 2, 3, s.iter().flat_map(|&v| [v; 3]).collect()).unwrap();
        let fused = fuse_similarities(&t);
        for (a, b) in fused.values.iter().zip(s) {
            assert!((a - b).abs() < 1e-15);
        }

        let cancel =
            SimilarityTensor::new(2, 2, 2, s.iter().flat_map(|&v| [v, -v]).collect()).unwrap();
        assert!(fuse_similarities(&cancel).values.iter().all(|&v| v == 0.0));

        assert!(SimilarityTensor::new(1, 1, 0, vec![]).is_err());
        assert!(SimilarityTensor::new(1, 1, 1, vec![f64::NAN]).is_err());

        let w = fuse_weighted(&cancel, &[1.0, 0.0]).unwrap();
        assert_eq!(w.values, s.to_vec());
    }

    #[test]
    fn fifteen_pair_mean() {
        let values: Vec<f64> = (0..15).map(|p| p as f64).collect();
        let t = SimilarityTensor::new(1, 1, 15, values).unwrap();
        assert_eq!(fuse_similarities(&t).values, vec![7.0]);
    }

    #[test]
    fn ranking_examples() {
        let g = ids(4);
        let fused = ScoreMatrix::new(
            3,
            4,
            vec![
                0.1, 0.9, 0.3, 0.2, // truth g1 strictly highest -> 1
                0.5, 0.5, 0.1, 0.0, // truth g1 tied with g0 -> 2
                0.4, 0.3, 0.2, 0.1, // truth g3 lowest -> 4
            ],
        )
        .unwrap();
        let truth = vec!["g1".to_string(), "g1".to_string(), "g3".to_string()];
        let res = rank_queries(&fused, &g, &truth).unwrap();
        assert_eq!(res.ranks(), vec![1, 2, 4]);
        assert_eq!(res.queries[1].order, vec![0, 1, 2, 3]);
        assert!((mrr(&res).unwrap() - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(recall_at_k(&res, 5).unwrap(), 1.0);
        assert!((recall_at_k(&res, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);

        let bad = rank_queries(&fused, &g, &["g1".into(), "zz".into(), "g0".into()]);
        assert!(matches!(bad, Err(OmgError::UnknownTruthId(id)) if id == "zz"));
    }

    #[test]
    fn metric_examples() {
        assert_eq!(mrr_from_ranks(&[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(recall_from_ranks(&[6, 7], 5).unwrap(), 0.0);
        assert!((recall_from_ranks(&[1, 10, 11], 10).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(mrr_from_ranks(&[]).is_err());
    }

    #[test]
    fn mean_embedding_cases() {
        let v = vec![0.6, 0.8];
        let m = mean_embedding(&[v.clone(), v.clone(), v.clone()]).unwrap();
        assert!(m.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(matches!(
            mean_embedding(&[vec![1.0, 0.0], vec![-1.0, 0.0]]),
            Err(OmgError::DegenerateEmbedding(_))
        ));
        let m = mean_embedding(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((m[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }
}
