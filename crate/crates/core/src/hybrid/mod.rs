//! The hybrid quality metric: a linear model over conversation metrics,
//! fit leave-bot-out against human quality ratings.

pub mod ratings;
pub mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

pub use ratings::{normalize_ratings, quality_labels, NormalizedRating, MIN_ANNOTATOR_RATINGS};
pub use stats::{cohen_kappa, kendall, pearson, pearson_r, spearman, Correlation, CorrelationMethod, StatsError};

use crate::domain::BotId;
use crate::metrics::{MetricVector, FEATURE_COUNT, FEATURE_NAMES};

pub const SINGULAR_RIDGE: f64 = 1e-8;
pub const CI_LEVEL: f64 = 0.90;

#[derive(Debug, Error)]
pub enum HybridError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("invalid model file: {0}")]
    Format(#[from] serde_json::Error),
}

/// One human-rated conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub bot_id: BotId,
    pub features: MetricVector,
    pub quality: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub mean: f64,
    pub std: f64,
}

/// M_H = Σ λᵢ·zᵢ + M₀ with zᵢ the training-fold z-score of feature i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridModel {
    pub held_out_bot: BotId,
    pub intercept: f64,
    /// Every feature, in metric order; dropped features carry 0.
    pub lambdas: IndexMap<String, f64>,
    /// Retained features only.
    pub scaler: IndexMap<String, Scale>,
    pub imputation: IndexMap<String, f64>,
    #[serde(default)]
    pub singular: bool,
    #[serde(default)]
    pub n_train: usize,
}

impl HybridModel {
    pub fn predict(&self, features: &MetricVector) -> f64 {
        predict_quality(self, features)
    }

    pub fn retained(&self) -> impl Iterator<Item = &str> {
        self.scaler.keys().map(String::as_str)
    }

    /// Intercept and coefficients on the original feature scale.
    pub fn raw_coefficients(&self) -> (f64, IndexMap<String, f64>) {
        let mut intercept = self.intercept;
        let mut coefs = IndexMap::new();
        for (name, scale) in &self.scaler {
            let lambda = self.lambdas.get(name).copied().unwrap_or(0.0);
            coefs.insert(name.clone(), lambda / scale.std);
            intercept -= lambda * scale.mean / scale.std;
        }
        (intercept, coefs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HybridError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), HybridError> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

pub fn predict_quality(model: &HybridModel, features: &MetricVector) -> f64 {
    let values = features.to_array();
    let mut total = model.intercept;
    for (i, name) in FEATURE_NAMES.iter().enumerate() {
        let Some(scale) = model.scaler.get(*name) else { continue };
        let lambda = model.lambdas.get(*name).copied().unwrap_or(0.0);
        let x = values[i].or_else(|| model.imputation.get(*name).copied()).unwrap_or(scale.mean);
        total += lambda * (x - scale.mean) / scale.std;
    }
    total
}

fn canonical_order(a: &LabeledExample, b: &LabeledExample) -> std::cmp::Ordering {
    let key = |e: &LabeledExample| e.features.to_array().map(|v| v.map(f64::to_bits));
    key(a)
        .cmp(&key(b))
        .then(a.quality.to_bits().cmp(&b.quality.to_bits()))
        .then_with(|| a.bot_id.cmp(&b.bot_id))
}

/// Solves the symmetric system `g·x = b` by Cholesky. `None` when a pivot falls to
/// `relative_pivot` times the largest diagonal entry or below.
fn cholesky_solve(g: &[Vec<f64>], b: &[f64], relative_pivot: f64) -> Option<Vec<f64>> {
    let n = b.len();
    let max_diag = (0..n).map(|i| g[i][i]).fold(0.0, f64::max);
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = g[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if s <= relative_pivot * max_diag {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    Some(x)
}

/// Ordinary least squares on z-scored features of every example not from `held_out`.
pub fn fit_hybrid(examples: &[LabeledExample], held_out: &BotId) -> Result<HybridModel, HybridError> {
    let bots: BTreeSet<&BotId> = examples.iter().map(|e| &e.bot_id).collect();
    if bots.len() < 2 {
        return Err(HybridError::InsufficientData(format!("need at least 2 bots, found {}", bots.len())));
    }
    let mut train: Vec<&LabeledExample> = examples.iter().filter(|e| &e.bot_id != held_out).collect();
    train.sort_by(|a, b| canonical_order(a, b));
    if train.is_empty() {
        return Err(HybridError::InsufficientData("no training examples".into()));
    }
    let n = train.len() as f64;

    let mut columns: Vec<(usize, Vec<f64>, f64, Scale)> = Vec::new();
    for i in 0..FEATURE_COUNT {
        let raw: Vec<Option<f64>> = train.iter().map(|e| e.features.to_array()[i]).collect();
        let present: Vec<f64> = raw.iter().flatten().copied().collect();
        if present.is_empty() {
            continue;
        }
        let fill = present.iter().sum::<f64>() / present.len() as f64;
        let col: Vec<f64> = raw.iter().map(|v| v.unwrap_or(fill)).collect();
        let mean = col.iter().sum::<f64>() / n;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std <= 1e-12 * (1.0 + mean.abs()) {
            continue;
        }
        let z = col.iter().map(|v| (v - mean) / std).collect();
        columns.push((i, z, fill, Scale { mean, std }));
    }
    if train.len() < columns.len() + 1 {
        return Err(HybridError::InsufficientData(format!(
            "{} training examples for {} features",
            train.len(),
            columns.len()
        )));
    }

    let y: Vec<f64> = train.iter().map(|e| e.quality).collect();
    let intercept = y.iter().sum::<f64>() / n;
    let yc: Vec<f64> = y.iter().map(|v| v - intercept).collect();
    let k = columns.len();
    let mut gram = vec![vec![0.0; k]; k];
    let mut rhs = vec![0.0; k];
    for a in 0..k {
        for b in 0..=a {
            let s: f64 = columns[a].1.iter().zip(&columns[b].1).map(|(x, y)| x * y).sum();
            gram[a][b] = s;
            gram[b][a] = s;
        }
        rhs[a] = columns[a].1.iter().zip(&yc).map(|(x, y)| x * y).sum();
    }
    let (solution, singular) = match cholesky_solve(&gram, &rhs, 1e-10) {
        Some(x) => (x, false),
        None => {
            let mut ridged = gram.clone();
            for (i, row) in ridged.iter_mut().enumerate() {
                row[i] += SINGULAR_RIDGE;
            }
            let x = cholesky_solve(&ridged, &rhs, 0.0)
                .ok_or_else(|| HybridError::InsufficientData("design matrix is degenerate".into()))?;
            (x, true)
        }
    };
    if singular {
        log::warn!("singular design for held-out bot {held_out}; using ridge fallback");
    }

    let mut lambdas: IndexMap<String, f64> = FEATURE_NAMES.iter().map(|n| (n.to_string(), 0.0)).collect();
    let mut scaler = IndexMap::new();
    let mut imputation = IndexMap::new();
    for ((i, _, fill, scale), lambda) in columns.iter().zip(solution) {
        let name = FEATURE_NAMES[*i].to_string();
        lambdas.insert(name.clone(), lambda);
        scaler.insert(name.clone(), *scale);
        imputation.insert(name, *fill);
    }
    Ok(HybridModel {
        held_out_bot: held_out.clone(),
        intercept,
        lambdas,
        scaler,
        imputation,
        singular,
        n_train: train.len(),
    })
}

/// Mean and confidence interval of one coefficient across leave-bot-out folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSummary {
    pub feature: String,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaveBotOutReport {
    pub models: BTreeMap<BotId, HybridModel>,
    pub lambdas: Vec<LambdaSummary>,
}

/// Fits one model per held-out bot and summarizes each λ across folds.
///
/// Folds share all but one bot's data, so the interval uses the jackknife
/// standard error `sqrt((k-1)/k · Σ(λⱼ - λ̄)²)` with a t quantile on k-1 degrees of freedom.
pub fn leave_bot_out_report(examples: &[LabeledExample]) -> Result<LeaveBotOutReport, HybridError> {
    let bots: Vec<BotId> = examples.iter().map(|e| e.bot_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if bots.len() < 3 {
        return Err(HybridError::InsufficientData(format!("need at least 3 bots, found {}", bots.len())));
    }
    let fitted: Vec<HybridModel> = bots.par_iter().map(|b| fit_hybrid(examples, b)).collect::<Result<_, _>>()?;
    let k = fitted.len() as f64;
    let t = StudentsT::new(0.0, 1.0, k - 1.0)
        .expect("valid t distribution")
        .inverse_cdf(0.5 + CI_LEVEL / 2.0);
    let lambdas = FEATURE_NAMES
        .iter()
        .map(|name| {
            let values: Vec<f64> = fitted.iter().map(|m| m.lambdas[*name]).collect();
            let mean = values.iter().sum::<f64>() / k;
            let se = ((k - 1.0) / k * values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()).sqrt();
            LambdaSummary {
                feature: name.to_string(),
                mean,
                ci_low: mean - t * se,
                ci_high: mean + t * se,
            }
        })
        .collect();
    Ok(LeaveBotOutReport {
        models: bots.into_iter().zip(fitted).collect(),
        lambdas,
    })
}
