//! Word-embedding sentence similarity: embedding average, vector extrema and
//! greedy matching.

use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::embeddings::{tokenize, WordVectorTable};

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, MetricError> {
    if u.len() != v.len() {
        return Err(MetricError::DimensionMismatch(u.len(), v.len()));
    }
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(MetricError::ZeroVector);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

fn in_vocabulary<'a, S: AsRef<str>>(tokens: &[S], table: &'a WordVectorTable) -> Result<Vec<&'a [f64]>, MetricError> {
    let vectors: Vec<&[f64]> = tokens.iter().filter_map(|t| table.get(t.as_ref())).collect();
    if vectors.is_empty() {
        return Err(MetricError::NoVectorTokens);
    }
    Ok(vectors)
}

/// Normalized sum of the in-vocabulary word vectors.
pub fn embedding_average<S: AsRef<str>>(tokens: &[S], table: &WordVectorTable) -> Result<Vec<f64>, MetricError> {
    let vectors = in_vocabulary(tokens, table)?;
    let mut sum = vec![0.0; table.dimension()];
    let mut mass = 0.0;
    for v in &vectors {
        for (acc, x) in sum.iter_mut().zip(v.iter()) {
            *acc += x;
            mass += x.abs();
        }
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= 1e-12 * mass || norm == 0.0 {
        return Err(MetricError::ZeroSum);
    }
    Ok(sum.into_iter().map(|x| x / norm).collect())
}

/// Per dimension, the largest value if it exceeds the magnitude of the smallest, else the smallest.
pub fn vector_extrema<S: AsRef<str>>(tokens: &[S], table: &WordVectorTable) -> Result<Vec<f64>, MetricError> {
    let vectors = in_vocabulary(tokens, table)?;
    let dim = table.dimension();
    let mut out = Vec::with_capacity(dim);
    for d in 0..dim {
        let max = vectors.iter().map(|v| v[d]).fold(f64::NEG_INFINITY, f64::max);
        let min = vectors.iter().map(|v| v[d]).fold(f64::INFINITY, f64::min);
        out.push(if max > min.abs() { max } else { min });
    }
    Ok(out)
}

fn directed_greedy(source: &[&[f64]], target: &[&[f64]]) -> Result<f64, MetricError> {
    let mut total = 0.0;
    for s in source {
        let mut best = f64::NEG_INFINITY;
        for t in target {
            best = best.max(cosine(s, t)?);
        }
        total += best;
    }
    Ok(total / source.len() as f64)
}

/// Symmetric greedy matching: the mean of both directed matches.
pub fn greedy_score<S: AsRef<str>, T: AsRef<str>>(source: &[S], target: &[T], table: &WordVectorTable) -> Result<f64, MetricError> {
    let s = in_vocabulary(source, table)?;
    let t = in_vocabulary(target, table)?;
    Ok((directed_greedy(&s, &t)? + directed_greedy(&t, &s)?) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMetric {
    Avg,
    Ext,
    Grd,
}

impl EmbeddingMetric {
    pub const ALL: [EmbeddingMetric; 3] = [EmbeddingMetric::Avg, EmbeddingMetric::Ext, EmbeddingMetric::Grd];

    pub fn name(self) -> &'static str {
        match self {
            EmbeddingMetric::Avg => "avg",
            EmbeddingMetric::Ext => "ext",
            EmbeddingMetric::Grd => "grd",
        }
    }
}

impl std::str::FromStr for EmbeddingMetric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "avg" => Ok(EmbeddingMetric::Avg),
            "ext" => Ok(EmbeddingMetric::Ext),
            "grd" => Ok(EmbeddingMetric::Grd),
            other => Err(format!("unknown embedding metric `{other}`")),
        }
    }
}

/// Similarity of two token sequences under `kind`.
pub fn token_similarity<S: AsRef<str>, T: AsRef<str>>(
    kind: EmbeddingMetric,
    a: &[S],
    b: &[T],
    table: &WordVectorTable,
) -> Result<f64, MetricError> {
    match kind {
        EmbeddingMetric::Avg => cosine(&embedding_average(a, table)?, &embedding_average(b, table)?),
        EmbeddingMetric::Ext => cosine(&vector_extrema(a, table)?, &vector_extrema(b, table)?),
        EmbeddingMetric::Grd => greedy_score(a, b, table),
    }
}

/// Compares a generated response with the reference (target) response.
pub fn reference_metric(kind: EmbeddingMetric, target: &str, generated: &str, table: &WordVectorTable) -> Result<f64, MetricError> {
    token_similarity(kind, &tokenize(target), &tokenize(generated), table)
}

/// Compares a response with the query it answers.
pub fn word_coherence(kind: EmbeddingMetric, query: &str, response: &str, table: &WordVectorTable) -> Result<f64, MetricError> {
    token_similarity(kind, &tokenize(query), &tokenize(response), table)
}
