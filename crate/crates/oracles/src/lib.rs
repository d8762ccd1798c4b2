//! Brute-force reference computations.
//!
//! Everything here is written against plain slices and tuples so that this
//! crate never links against the implementations it is used to check. Each
//! oracle is deliberately naive: exhaustive enumeration, quadratic pair
//! counting, central differences.

use thiserror::Error;

/// Longest sequence the exhaustive DTW enumeration accepts.
pub const DTW_MAX_LEN: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("{oracle}: instance size {size} exceeds the oracle bound {bound}")]
    SizeBound {
        oracle: &'static str,
        size: usize,
        bound: usize,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("{0}: both classes must be present")]
    SingleClass(&'static str),
    #[error("{0}: step must be positive")]
    BadStep(&'static str),
    #[error("{oracle}: non-finite evaluation at coordinate {index}")]
    NonFinite { oracle: &'static str, index: usize },
}

/// A value computed by an oracle together with how it was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult<T> {
    pub value: T,
    pub method: &'static str,
    pub size_bound: Option<usize>,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Minimum alignment cost found by walking every monotone path from
/// `(0, 0)` to `(n-1, m-1)` with unit steps right, down and diagonal.
pub fn dtw_bruteforce(
    a: &[(f64, f64)],
    b: &[(f64, f64)],
) -> Result<OracleResult<f64>, OracleError> {
    if a.is_empty() || b.is_empty() {
        return Err(OracleError::Empty("dtw_bruteforce"));
    }
    let size = a.len().max(b.len());
    if size > DTW_MAX_LEN {
        return Err(OracleError::SizeBound {
            oracle: "dtw_bruteforce",
            size,
            bound: DTW_MAX_LEN,
        });
    }

    fn walk(a: &[(f64, f64)], b: &[(f64, f64)], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + dist(a[i], b[j]);
        if i + 1 == a.len() && j + 1 == b.len() {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, acc, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, acc, best);
        }
    }

    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    Ok(OracleResult {
        value: best,
        method: "exhaustive monotone path enumeration",
        size_bound: Some(DTW_MAX_LEN),
    })
}

/// Number of monotone alignment paths between sequences of the given lengths
/// (the Delannoy number), useful for sanity-checking the enumeration.
pub fn alignment_path_count(n: usize, m: usize) -> u64 {
    let mut table = vec![vec![0u64; m]; n];
    for i in 0..n {
        for j in 0..m {
            table[i][j] = if i == 0 || j == 0 {
                1
            } else {
                table[i - 1][j] + table[i][j - 1] + table[i - 1][j - 1]
            };
        }
    }
    table[n - 1][m - 1]
}

/// ROC-AUC as the fraction of (positive, negative) pairs where the positive
/// scores higher, ties counting one half. `labels` are true for positives.
pub fn auc_paircount(scores: &[f64], labels: &[bool]) -> Result<OracleResult<f64>, OracleError> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let mut wins = 0.0;
    let mut pairs = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    if pairs == 0 {
        return Err(OracleError::SingleClass("auc_paircount"));
    }
    Ok(OracleResult {
        value: wins / pairs as f64,
        method: "quadratic pair counting",
        size_bound: None,
    })
}

/// Central-difference gradient of a scalar function.
pub fn finite_difference_gradient<F>(
    mut f: F,
    params: &[f64],
    step: f64,
) -> Result<OracleResult<Vec<f64>>, OracleError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(OracleError::BadStep("finite_difference_gradient"));
    }
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(OracleError::NonFinite {
                oracle: "finite_difference_gradient",
                index: i,
            });
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(OracleResult {
        value: grad,
        method: "central differences",
        size_bound: None,
    })
}

/// Largest relative error between two gradients, with an absolute floor so
/// that near-zero components do not dominate.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Pearson correlation computed from raw sums.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Pearson chi-squared statistic of a contingency table.
pub fn chi_squared(table: &[Vec<u64>]) -> f64 {
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let cols: Vec<f64> = (0..table[0].len())
        .map(|j| table.iter().map(|r| r[j]).sum::<u64>() as f64)
        .collect();
    let n: f64 = rows.iter().sum();
    let mut chi = 0.0;
    for (i, r) in table.iter().enumerate() {
        for (j, &obs) in r.iter().enumerate() {
            let expected = rows[i] * cols[j] / n;
            chi += (obs as f64 - expected).powi(2) / expected;
        }
    }
    chi
}

/// Best F1 over a dense grid of thresholds (predict positive when s > θ).
pub fn best_f1_grid(scores: &[f64], labels: &[bool], grid: usize) -> f64 {
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut thresholds: Vec<f64> = (0..=grid)
        .map(|k| lo + (hi - lo) * k as f64 / grid as f64)
        .collect();
    thresholds.push(lo - 1.0);
    // the grid alone can step over the optimum, so every score is tried too
    thresholds.extend_from_slice(scores);
    thresholds
        .iter()
        .map(|&t| f1_at(scores, labels, t))
        .fold(0.0, f64::max)
}

pub fn f1_at(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > threshold, l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}
