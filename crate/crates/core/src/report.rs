//! Per-turn trajectories of interactive conversations, summarized by group.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::domain::{Conversation, Speaker};
use crate::embeddings::embed_emotion;
use crate::metrics::{laughter, sentiment_score, word_coherence, word_count, EmbeddingMetric, FeatureExtractor, MetricError};

pub const TRAJECTORY_METRICS: [&str; 5] = ["vote", "n_words", "sentiment", "laughter", "avg_word_coherence"];

/// Metric values for one exchange (user message plus bot reply); `None` where undefined.
pub type TurnValues = [Option<f64>; 5];

/// Values per exchange, in order. Exchange `t` is the t-th user message and the reply that follows it.
pub fn turn_values(conv: &Conversation, extractor: &FeatureExtractor) -> Result<Vec<TurnValues>, MetricError> {
    let utts = conv.utterances();
    let mut out = Vec::new();
    for (i, u) in utts.iter().enumerate() {
        if u.speaker != Speaker::A {
            continue;
        }
        let reply = utts.get(i + 1);
        let vote = reply.map(|r| conv.votes().get(&r.index).map_or(0.0, |v| v.signum()));
        let emotion = embed_emotion(extractor.emotion.as_ref(), &u.text)?;
        let coherence = match reply {
            Some(r) => match word_coherence(EmbeddingMetric::Avg, &u.text, &r.text, &extractor.words) {
                Ok(v) => Some(v),
                Err(e) if e.is_undefined() => None,
                Err(e) => return Err(e),
            },
            None => None,
        };
        out.push([
            vote,
            Some(word_count(&u.text) as f64),
            Some(sentiment_score(&emotion, &extractor.weights)),
            Some(laughter(&u.text) as f64),
            coherence,
        ]);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub n: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Mean with a two-sided 90% t-interval. A single value gets a zero-width interval.
pub fn t_interval(values: &[f64]) -> Option<Interval> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some(Interval {
            n,
            mean,
            ci_low: mean,
            ci_high: mean,
        });
    }
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid t distribution").inverse_cdf(0.95);
    let half = t * sd / (n as f64).sqrt();
    Some(Interval {
        n,
        mean,
        ci_low: mean - half,
        ci_high: mean + half,
    })
}

/// One row per turn index: the interval of each metric over conversations reaching that turn.
pub fn summarize(trajectories: &[Vec<TurnValues>]) -> Vec<(usize, [Option<Interval>; 5])> {
    let turns = trajectories.iter().map(Vec::len).max().unwrap_or(0);
    (0..turns)
        .map(|t| {
            let mut row = [None; 5];
            for (m, slot) in row.iter_mut().enumerate() {
                let values: Vec<f64> = trajectories.iter().filter_map(|tr| tr.get(t).and_then(|v| v[m])).collect();
                *slot = t_interval(&values);
            }
            (t, row)
        })
        .collect()
}

pub fn write_summary_csv(path: impl AsRef<Path>, rows: &[(usize, [Option<Interval>; 5])]) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["turn".to_string()];
    for m in TRAJECTORY_METRICS {
        for col in ["n", "mean", "ci_low", "ci_high"] {
            header.push(format!("{m}_{col}"));
        }
    }
    w.write_record(&header)?;
    for (turn, row) in rows {
        let mut record = vec![turn.to_string()];
        for cell in row {
            match cell {
                Some(i) => record.extend([i.n.to_string(), i.mean.to_string(), i.ci_low.to_string(), i.ci_high.to_string()]),
                None => record.extend(["0".to_string(), String::new(), String::new(), String::new()]),
            }
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// The `top_n` highest- and `bottom_n` lowest-rated conversations. Unrated conversations are ignored;
/// ties are broken by conversation id.
pub fn quality_groups<'a>(
    conversations: &'a [Conversation],
    quality: &BTreeMap<String, f64>,
    top_n: usize,
    bottom_n: usize,
) -> (Vec<&'a Conversation>, Vec<&'a Conversation>) {
    let mut rated: Vec<(&Conversation, f64)> = conversations.iter().filter_map(|c| quality.get(&c.id).map(|q| (c, *q))).collect();
    rated.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.id.cmp(&b.0.id)));
    let top = rated.iter().take(top_n).map(|(c, _)| *c).collect();
    let bottom = rated.iter().rev().take(bottom_n).map(|(c, _)| *c).collect();
    (top, bottom)
}

/// Splits by bot variant: `EI` (any case) versus everything else.
pub fn variant_groups(conversations: &[Conversation]) -> (Vec<&Conversation>, Vec<&Conversation>) {
    conversations.iter().partition(|c| c.bot_id.variant.eq_ignore_ascii_case("ei"))
}
