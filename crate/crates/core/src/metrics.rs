//! Cosine similarity, Spearman rank correlation and batch evaluation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compose::{ComposedPair, CompositionVariant};
use crate::projection::{ProjectionError, ProjectionModel};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("zero-norm vector")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two observations, got {0}")]
    TooFew(usize),
    #[error("input is constant; rank correlation undefined")]
    ConstantInput,
}

impl From<ProjectionError> for MetricError {
    fn from(e: ProjectionError) -> Self {
        match e {
            ProjectionError::DimMismatch { expected, got } => MetricError::DimMismatch(expected, got),
            _ => MetricError::DimMismatch(0, 0),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `ab / sqrt(aa * bb)`; exact (1.0) when `a == b`.
pub(crate) fn cosine_from_parts(ab: f64, aa: f64, bb: f64) -> f64 {
    ab / (aa * bb).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::DimMismatch(a.len(), b.len()));
    }
    let (sa, sb) = (dot(a, a), dot(b, b));
    if sa == 0.0 || sb == 0.0 {
        return Err(MetricError::ZeroVector);
    }
    Ok(cosine_from_parts(dot(a, b), sa, sb).clamp(-1.0, 1.0))
}

/// Fractional ranks starting at 1; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end (0-based) share rank mean(start+1..=end)
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(MetricError::TooFew(n));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::ConstantInput);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricError::TooFew(x.len()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(MetricError::ConstantInput);
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Raw coefficient in [-1, 1].
    pub spearman: f64,
    pub n: usize,
    pub variant: Option<CompositionVariant>,
    pub model_id: String,
}

impl EvalReport {
    /// The coefficient scaled by 100, as printed in result tables.
    pub fn spearman_x100(&self) -> f64 {
        self.spearman * 100.0
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub scores: Vec<f64>,
    pub ratings: Vec<f64>,
}

/// Scores every pair (raw cosine, or cosine of eval-mode projections when a
/// model is given) and correlates the scores with the ratings.
pub fn evaluate(
    pairs: &[ComposedPair],
    model: Option<&ProjectionModel>,
) -> Result<Evaluation, MetricError> {
    if pairs.len() < 2 {
        return Err(MetricError::TooFew(pairs.len()));
    }
    let scores = match model {
        None => pairs
            .iter()
            .map(|p| cosine(&p.e1, &p.e2))
            .collect::<Result<Vec<_>, _>>()?,
        Some(model) => model.score_pairs(pairs)?,
    };
    let ratings: Vec<f64> = pairs.iter().map(|p| p.rating).collect();
    let spearman = spearman(&scores, &ratings)?;
    Ok(Evaluation {
        report: EvalReport {
            spearman,
            n: pairs.len(),
            variant: None,
            model_id: "unsupervised".into(),
        },
        scores,
        ratings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // O(n^2) average-rank oracle: rank = (#less) + (#equal + 1) / 2.
    fn oracle_ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|x| {
                let less = v.iter().filter(|y| *y < x).count() as f64;
                let equal = v.iter().filter(|y| *y == x).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 2.0], &[-1.0, -2.0]).unwrap(), -1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), Err(MetricError::ZeroVector));
        assert_eq!(cosine(&[1.0], &[1.0, 1.0]), Err(MetricError::DimMismatch(1, 2)));
    }

    #[test]
    fn spearman_examples() {
        let x = [0.3, 1.2, -4.0, 8.0, 2.2];
        assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let mut sorted = x.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rev: Vec<f64> = sorted.iter().rev().copied().collect();
        assert!((spearman(&sorted, &rev).unwrap() + 1.0).abs() < 1e-15);

        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
        // 3 / sqrt(10): Pearson of (1, 2.5, 2.5, 4) against (1, 2, 3, 4)
        let rho = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((rho - 0.9486832980505138).abs() < 1e-12);
        assert!((rho - 3.0 / 10f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn spearman_errors() {
        assert_eq!(spearman(&[1.0, 2.0], &[1.0]), Err(MetricError::LengthMismatch(2, 1)));
        assert_eq!(spearman(&[1.0], &[1.0]), Err(MetricError::TooFew(1)));
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(MetricError::ConstantInput));
    }

    fn with_ties() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec((0i32..12).prop_map(|v| v as f64 * 0.5), 2..60)
    }

    proptest! {
        #[test]
        fn ranks_match_oracle(v in with_ties()) {
            prop_assert_eq!(average_ranks(&v), oracle_ranks(&v));
        }

        #[test]
        fn spearman_symmetric_and_monotone_invariant(
            pairs in proptest::collection::vec((0.01f64..10.0, 0.01f64..10.0), 3..80)
        ) {
            let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let rho = spearman(&x, &y).unwrap();
            prop_assert_eq!(rho, spearman(&y, &x).unwrap());
            let affine: Vec<f64> = x.iter().map(|v| 2.0 * v + 7.0).collect();
            let cubed: Vec<f64> = x.iter().map(|v| v * v * v).collect();
            prop_assert_eq!(average_ranks(&affine), average_ranks(&x));
            prop_assert_eq!(average_ranks(&cubed), average_ranks(&x));
            prop_assert_eq!(spearman(&affine, &y).unwrap(), rho);
            prop_assert_eq!(spearman(&cubed, &y).unwrap(), rho);
        }

        #[test]
        fn cosine_scale_invariant(
            v in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20),
            alpha in 0.01f64..100.0,
            beta in 0.01f64..100.0,
        ) {
            let a: Vec<f64> = v.iter().map(|p| p.0).collect();
            let b: Vec<f64> = v.iter().map(|p| p.1).collect();
            prop_assume!(norm(&a) > 1e-6 && norm(&b) > 1e-6);
            let sa: Vec<f64> = a.iter().map(|x| alpha * x).collect();
            let sb: Vec<f64> = b.iter().map(|x| beta * x).collect();
            let c = cosine(&a, &b).unwrap();
            prop_assert!((cosine(&sa, &sb).unwrap() - c).abs() < 1e-12);
            prop_assert_eq!(c, cosine(&b, &a).unwrap());
        }
    }
}
