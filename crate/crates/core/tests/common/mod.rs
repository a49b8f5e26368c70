//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Word vectors indexed by token position; `None` entries in a sentence are out of vocabulary.
#[derive(Debug, Clone)]
pub struct Vocab {
    pub vectors: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn oracle_cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
    }
}

impl Vocab {
    fn known(&self, sentence: &[Option<usize>]) -> Vec<Vec<f64>> {
        sentence.iter().flatten().map(|&i| self.vectors[i].clone()).collect()
    }

    fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    /// ē = Σ e_w / |Σ e_w|.
    pub fn average(&self, sentence: &[Option<usize>]) -> Option<Vec<f64>> {
        let words = self.known(sentence);
        if words.is_empty() {
            return None;
        }
        let mut sum = vec![0.0; self.dim()];
        for w in &words {
            for d in 0..sum.len() {
                sum[d] += w[d];
            }
        }
        let n = norm(&sum);
        if n == 0.0 {
            return None;
        }
        Some(sum.iter().map(|x| x / n).collect())
    }

    pub fn extrema(&self, sentence: &[Option<usize>]) -> Option<Vec<f64>> {
        let words = self.known(sentence);
        if words.is_empty() {
            return None;
        }
        let mut out = Vec::new();
        for d in 0..self.dim() {
            let col: Vec<f64> = words.iter().map(|w| w[d]).collect();
            let hi = col.iter().cloned().fold(f64::MIN, f64::max);
            let lo = col.iter().cloned().fold(f64::MAX, f64::min);
            out.push(if hi > -lo { hi } else { lo });
        }
        Some(out)
    }

    fn directed(&self, s: &[Vec<f64>], t: &[Vec<f64>]) -> Option<f64> {
        let mut total = 0.0;
        for a in s {
            let mut best: Option<f64> = None;
            for b in t {
                let c = oracle_cosine(a, b)?;
                best = Some(best.map_or(c, |x: f64| x.max(c)));
            }
            total += best?;
        }
        Some(total / s.len() as f64)
    }

    pub fn greedy(&self, s: &[Option<usize>], t: &[Option<usize>]) -> Option<f64> {
        let (a, b) = (self.known(s), self.known(t));
        if a.is_empty() || b.is_empty() {
            return None;
        }
        Some((self.directed(&a, &b)? + self.directed(&b, &a)?) / 2.0)
    }

    pub fn metric(&self, kind: &str, s: &[Option<usize>], t: &[Option<usize>]) -> Option<f64> {
        match kind {
            "avg" => oracle_cosine(&self.average(s)?, &self.average(t)?),
            "ext" => oracle_cosine(&self.extrema(s)?, &self.extrema(t)?),
            "grd" => self.greedy(s, t),
            _ => unreachable!(),
        }
    }
}

/// Word-vector file text for the vocabulary `w0 … w{n-1}`.
pub fn vocab_file(vocab: &Vocab) -> String {
    let mut s = String::new();
    for (i, v) in vocab.vectors.iter().enumerate() {
        s.push_str(&format!("w{i}"));
        for x in v {
            s.push_str(&format!(" {x}"));
        }
        s.push('\n');
    }
    s
}

/// Sentence text; `None` becomes an out-of-vocabulary word.
pub fn sentence_text(sentence: &[Option<usize>]) -> String {
    sentence
        .iter()
        .map(|t| t.map_or("oov".to_string(), |i| format!("w{i}")))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Least squares with intercept on raw features, solved by SVD: returns (intercept, coefficients).
pub fn ols(x: &[Vec<f64>], y: &[f64]) -> (f64, Vec<f64>) {
    let n = x.len();
    let k = x[0].len();
    let design = DMatrix::from_fn(n, k + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
    let target = DVector::from_column_slice(y);
    let beta = design.svd(true, true).solve(&target, 1e-12).expect("svd solve");
    (beta[0], beta.iter().skip(1).copied().collect())
}

pub fn r_squared(predicted: &[f64], truth: &[f64]) -> f64 {
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_res: f64 = predicted.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

/// Textbook Pearson r.
pub fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}
