//! Isotropy diagnostics for a set of embeddings.
//!
//! Two measures are reported:
//!
//! * the distribution of cosines between each row and the mean row; a tight
//!   peak near 1 means the rows share one dominant direction;
//! * `I_iso = min_u F(u) / max_u F(u)` with `F(u) = sum_j exp(e_j . u)` over
//!   unit-normalized rows `e_j` and `k` random unit directions `u`. Values
//!   near 1 mean no direction is preferred.
//!
//! `F` is evaluated in the log domain, so large `n` cannot overflow.

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{dot, norm};

pub const DEFAULT_DIRECTIONS: usize = 1000;
const ZERO_TOL: f64 = 1e-12;
const DIRECTION_BLOCK: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum IsotropyError {
    #[error("mean vector is (numerically) zero")]
    DegenerateMean,
    #[error("row {0} has zero norm")]
    ZeroRow(usize),
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("need at least one direction")]
    NoDirections,
    #[error("matrices differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosToMean {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub per_row: Vec<f64>,
}

pub fn cos_to_mean_stats(e: ArrayView2<f64>) -> Result<CosToMean, IsotropyError> {
    let n = e.nrows();
    if n < 2 {
        return Err(IsotropyError::TooFewRows { needed: 2, got: n });
    }
    let mu = e.mean_axis(Axis(0)).expect("non-empty");
    let mu = mu.as_slice().expect("contiguous");
    let mu_norm = norm(mu);
    if mu_norm < ZERO_TOL {
        return Err(IsotropyError::DegenerateMean);
    }
    let per_row = e
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let row = row.to_vec();
            let rn = norm(&row);
            if rn == 0.0 {
                return Err(IsotropyError::ZeroRow(i));
            }
            Ok((dot(&row, mu) / (rn * mu_norm)).clamp(-1.0, 1.0))
        })
        .collect::<Result<Vec<f64>, _>>()?;
    let mean = per_row.iter().sum::<f64>() / n as f64;
    let var = per_row.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n as f64;
    Ok(CosToMean {
        mean,
        std: var.sqrt(),
        per_row,
    })
}

/// `k` directions drawn uniformly from the unit sphere in `dim` dimensions
/// (normalized standard normals), one per row.
pub fn sample_directions(dim: usize, k: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = Array2::<f64>::zeros((k, dim));
    for mut row in u.rows_mut() {
        loop {
            for x in row.iter_mut() {
                *x = StandardNormal.sample(&mut rng);
            }
            let n = row.dot(&row).sqrt();
            if n > ZERO_TOL {
                row /= n;
                break;
            }
        }
    }
    u
}

fn unit_rows(e: ArrayView2<f64>) -> Result<Array2<f64>, IsotropyError> {
    let mut out = e.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if n < ZERO_TOL {
            return Err(IsotropyError::ZeroRow(i));
        }
        row /= n;
    }
    Ok(out)
}

/// `log F(u)` for every direction row of `directions`.
pub fn log_partition(
    e: ArrayView2<f64>,
    directions: ArrayView2<f64>,
) -> Result<Vec<f64>, IsotropyError> {
    if e.nrows() == 0 {
        return Err(IsotropyError::TooFewRows { needed: 1, got: 0 });
    }
    if e.ncols() != directions.ncols() {
        return Err(IsotropyError::ShapeMismatch(e.dim(), directions.dim()));
    }
    let unit = unit_rows(e)?;
    let mut out = Vec::with_capacity(directions.nrows());
    for block in directions.axis_chunks_iter(Axis(0), DIRECTION_BLOCK) {
        // n x block
        let proj = unit.dot(&block.t());
        for col in proj.columns() {
            let max = col.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let sum: f64 = col.iter().map(|&x| (x - max).exp()).sum();
            out.push(max + sum.ln());
        }
    }
    Ok(out)
}

fn ratio_from_logs(logs: &[f64]) -> f64 {
    let (lo, hi) = logs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    (lo - hi).exp()
}

/// Sampled isotropy ratio in (0, 1].
pub fn i_iso(e: ArrayView2<f64>, k: usize, seed: u64) -> Result<f64, IsotropyError> {
    if k == 0 {
        return Err(IsotropyError::NoDirections);
    }
    let directions = sample_directions(e.ncols(), k, seed);
    Ok(ratio_from_logs(&log_partition(e, directions.view())?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotropyReport {
    pub mean_cos_to_mean: f64,
    pub std_cos_to_mean: f64,
    pub i_iso: f64,
    pub k_directions: usize,
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
}

/// Both diagnostics for one matrix, plus the per-row cosines for histograms.
pub fn isotropy_report(
    e: ArrayView2<f64>,
    k: usize,
    seed: u64,
) -> Result<(IsotropyReport, Vec<f64>), IsotropyError> {
    let stats = cos_to_mean_stats(e)?;
    let ratio = i_iso(e, k, seed)?;
    Ok((
        IsotropyReport {
            mean_cos_to_mean: stats.mean,
            std_cos_to_mean: stats.std,
            i_iso: ratio,
            k_directions: k,
            n: e.nrows(),
            dim: e.ncols(),
            seed,
        },
        stats.per_row,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtractionComparison {
    /// `i_iso(with) - i_iso(without)`.
    pub delta_i_iso: f64,
    pub report_with: IsotropyReport,
    pub report_without: IsotropyReport,
}

/// Runs both diagnostics on embeddings with and without condition
/// subtraction, sharing one direction sample.
pub fn compare_subtraction(
    with: ArrayView2<f64>,
    without: ArrayView2<f64>,
    k: usize,
    seed: u64,
) -> Result<SubtractionComparison, IsotropyError> {
    if with.dim() != without.dim() {
        return Err(IsotropyError::ShapeMismatch(with.dim(), without.dim()));
    }
    let (report_with, _) = isotropy_report(with, k, seed)?;
    let (report_without, _) = isotropy_report(without, k, seed)?;
    Ok(SubtractionComparison {
        delta_i_iso: report_with.i_iso - report_without.i_iso,
        report_with,
        report_without,
    })
}

/// Counts of `values` in `bins` equal-width bins over `[lo, hi]`; values
/// outside the range land in the edge bins.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<usize> {
    let mut counts = vec![0; bins];
    if bins == 0 {
        return counts;
    }
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let b = ((v - lo) / width).floor();
        let b = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(bins - 1) };
        counts[b] += 1;
    }
    counts
}
