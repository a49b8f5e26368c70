//! Correlation and agreement statistics.

use std::collections::HashMap;
use std::hash::Hash;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PERMUTATIONS: usize = 10_000;
pub const PERMUTATION_SEED: u64 = 20_190_601;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("input has zero variance")]
    ZeroVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMethod {
    Pearson,
    Spearman,
    Kendall,
}

impl std::str::FromStr for CorrelationMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pearson" => Ok(CorrelationMethod::Pearson),
            "spearman" => Ok(CorrelationMethod::Spearman),
            "kendall" => Ok(CorrelationMethod::Kendall),
            other => Err(format!("unknown correlation method `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p: f64,
}

fn check(x: &[f64], y: &[f64]) -> Result<(), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(StatsError::TooFewPoints { needed: 3, got: x.len() });
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn centered(v: &[f64]) -> Result<(Vec<f64>, f64), StatsError> {
    let m = mean(v);
    let c: Vec<f64> = v.iter().map(|x| x - m).collect();
    let ss = c.iter().map(|x| x * x).sum::<f64>();
    let scale = v.iter().map(|x| x * x).sum::<f64>();
    if ss == 0.0 || ss <= 1e-24 * scale {
        return Err(StatsError::ZeroVariance);
    }
    Ok((c, ss.sqrt()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sample Pearson r without a p-value.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    check(x, y)?;
    let (cx, nx) = centered(x)?;
    let (cy, ny) = centered(y)?;
    Ok((dot(&cx, &cy) / (nx * ny)).clamp(-1.0, 1.0))
}

/// Pearson r with a two-sided permutation p-value.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation, StatsError> {
    pearson_with(x, y, PERMUTATIONS, PERMUTATION_SEED)
}

pub fn pearson_with(x: &[f64], y: &[f64], permutations: usize, seed: u64) -> Result<Correlation, StatsError> {
    check(x, y)?;
    let (cx, nx) = centered(x)?;
    let (mut cy, ny) = centered(y)?;
    let r = (dot(&cx, &cy) / (nx * ny)).clamp(-1.0, 1.0);
    let observed = dot(&cx, &cy).abs();
    let tolerance = 1e-12 * nx * ny;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extreme = 0usize;
    for _ in 0..permutations {
        cy.shuffle(&mut rng);
        if dot(&cx, &cy).abs() >= observed - tolerance {
            extreme += 1;
        }
    }
    Ok(Correlation {
        r,
        p: (extreme + 1) as f64 / (permutations + 1) as f64,
    })
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    check(x, y)?;
    pearson_r(&average_ranks(x), &average_ranks(y))
}

/// Kendall's tau-b.
pub fn kendall(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    check(x, y)?;
    let n = x.len();
    let (mut concordant, mut discordant, mut tied_x, mut tied_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = (x[i] - x[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            let dy = (y[i] - y[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            match (dx, dy) {
                (0, 0) => {
                    tied_x += 1;
                    tied_y += 1;
                }
                (0, _) => tied_x += 1,
                (_, 0) => tied_y += 1,
                _ if dx == dy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom = (((n0 - tied_x) * (n0 - tied_y)) as f64).sqrt();
    if denom == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((concordant - discordant) as f64 / denom)
}

pub fn correlate(method: CorrelationMethod, x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    match method {
        CorrelationMethod::Pearson => pearson_r(x, y),
        CorrelationMethod::Spearman => spearman(x, y),
        CorrelationMethod::Kendall => kendall(x, y),
    }
}

pub fn cohen_kappa<T: Eq + Hash>(a: &[T], b: &[T]) -> Result<f64, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(StatsError::TooFewPoints { needed: 1, got: 0 });
    }
    let n = a.len() as f64;
    let observed = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let mut marginals: HashMap<&T, (f64, f64)> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        marginals.entry(x).or_default().0 += 1.0;
        marginals.entry(y).or_default().1 += 1.0;
    }
    let expected: f64 = marginals.values().map(|(ca, cb)| (ca / n) * (cb / n)).sum();
    if (1.0 - expected).abs() < 1e-15 {
        return Ok(1.0);
    }
    Ok((observed - expected) / (1.0 - expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(pearson_r(&x, &x.map(|v| 2.0 * v + 1.0)).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pearson_r(&x, &x.map(|v| -v)).unwrap(), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pearson_r(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap(), 0.8, epsilon = 1e-9);
        assert_eq!(pearson_r(&x, &[1.0; 4]), Err(StatsError::ZeroVariance));
        assert_eq!(pearson_r(&x, &[1.0; 3]), Err(StatsError::LengthMismatch(4, 3)));
    }

    #[test]
    fn permutation_p_is_seed_stable() {
        let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v + (v * 1.7).sin() * 3.0).collect();
        let a = pearson(&x, &y).unwrap();
        let b = pearson(&x, &y).unwrap();
        assert_eq!(a, b);
        assert!(a.p > 0.0 && a.p <= 1.0);
        let perfect = pearson(&x, &x).unwrap();
        assert!(perfect.p < 0.01);
    }

    #[test]
    fn rank_examples() {
        let x = [1.0, 2.0, 3.0];
        assert_abs_diff_eq!(spearman(&x, &[1.0, 8.0, 27.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(kendall(&x, &[1.0, 8.0, 27.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(spearman(&x, &[3.0, 2.0, 1.0]).unwrap(), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(kendall(&x, &[3.0, 2.0, 1.0]).unwrap(), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(kendall(&x, &[1.0, 3.0, 2.0]).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0]), vec![1.5, 3.0, 1.5]);
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cohen_kappa(&["A", "B", "A"], &["A", "B", "A"]).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&["A", "A", "B", "B"], &["A", "B", "A", "B"]).unwrap(), 0.0);
        assert_eq!(cohen_kappa(&["A", "A"], &["B", "B"]).unwrap(), 0.0);
        assert_eq!(cohen_kappa(&["A", "A"], &["A", "A"]).unwrap(), 1.0);
        assert!(cohen_kappa(&["A"], &["A", "B"]).is_err());
    }
}
