//! Annotator rating normalization and per-conversation quality labels.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::domain::RatingRecord;

pub const MIN_ANNOTATOR_RATINGS: usize = 10;

/// A rating with each dimension z-scored within its annotator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRating {
    pub conversation_id: String,
    pub annotator_id: String,
    pub quality: f64,
    pub fluency: f64,
    pub diversity: f64,
    pub relatedness: f64,
    pub empathy: f64,
}

impl NormalizedRating {
    pub fn as_array(&self) -> [f64; 5] {
        [self.quality, self.fluency, self.diversity, self.relatedness, self.empathy]
    }
}

/// Drops annotators with fewer than `min_count` ratings and z-scores the rest per dimension.
/// Output keeps the input order.
pub fn normalize_ratings(ratings: &[RatingRecord], min_count: usize) -> Vec<NormalizedRating> {
    let mut by_annotator: HashMap<&str, Vec<&RatingRecord>> = HashMap::new();
    for r in ratings {
        by_annotator.entry(&r.annotator_id).or_default().push(r);
    }
    let mut stats: HashMap<&str, [(f64, f64); 5]> = HashMap::new();
    for (annotator, records) in &by_annotator {
        if records.len() < min_count {
            continue;
        }
        let n = records.len() as f64;
        let mut dims = [(0.0, 0.0); 5];
        for (d, slot) in dims.iter_mut().enumerate() {
            let values: Vec<f64> = records.iter().map(|r| r.scores.as_array()[d] as f64).collect();
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            *slot = (mean, var.sqrt());
        }
        stats.insert(annotator, dims);
    }
    ratings
        .iter()
        .filter_map(|r| {
            let dims = stats.get(r.annotator_id.as_str())?;
            let raw = r.scores.as_array();
            let z: Vec<f64> = (0..5)
                .map(|d| {
                    let (mean, std) = dims[d];
                    if std == 0.0 {
                        0.0
                    } else {
                        (raw[d] as f64 - mean) / std
                    }
                })
                .collect();
            Some(NormalizedRating {
                conversation_id: r.conversation_id.clone(),
                annotator_id: r.annotator_id.clone(),
                quality: z[0],
                fluency: z[1],
                diversity: z[2],
                relatedness: z[3],
                empathy: z[4],
            })
        })
        .collect()
}

/// Mean raw quality score per conversation.
pub fn quality_labels(ratings: &[RatingRecord]) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in ratings {
        let e = sums.entry(r.conversation_id.clone()).or_default();
        e.0 += r.scores.quality as f64;
        e.1 += 1;
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}
