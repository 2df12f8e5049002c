//! One-tailed paired Wilcoxon signed-rank and Welch t tests.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Largest number of non-zero differences handled by the exact null
/// distribution; above this a tie-corrected normal approximation is used.
pub const EXACT_LIMIT: usize = 12;
const MIN_PAIRS: usize = 5;

/// Average ranks (1-based) of `values`, plus the sizes of tie groups.
pub fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut k = i + 1;
        while k < idx.len() && values[idx[k]] == values[idx[i]] {
            k += 1;
        }
        let avg = (i + 1 + k) as f64 / 2.0;
        for &p in &idx[i..k] {
            ranks[p] = avg;
        }
        if k - i > 1 {
            ties.push(k - i);
        }
        i = k;
    }
    (ranks, ties)
}

/// Signed ranks of the non-zero differences `a - b`: `(ranks, positive flags, tie groups)`.
fn signed_ranks(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<bool>, Vec<usize>)> {
    if a.len() != b.len() {
        return Err(Error::Stats(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return Err(Error::Stats("all paired differences are zero".into()));
    }
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Stats("non-finite paired difference".into()));
    }
    if d.len() < MIN_PAIRS {
        return Err(Error::Stats(format!("need at least {MIN_PAIRS} non-zero differences, got {}", d.len())));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    Ok((ranks, d.iter().map(|v| *v > 0.0).collect(), ties))
}

/// Exact `P(W+ >= w_plus)` under the null, with ranks given in halves so they
/// are integral.
fn exact_upper_tail(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    // counts[s] = number of sign patterns whose doubled positive-rank sum is s
    let mut counts = vec![0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let threshold = (2.0 * w_plus).round() as usize;
    let total = 2f64.powi(ranks.len() as i32);
    counts[threshold..].iter().sum::<f64>() / total
}

/// One-tailed paired Wilcoxon signed-rank test of the alternative `b < a`.
///
/// Zero differences are dropped and tied magnitudes share their average rank.
pub fn wilcoxon_signed_rank_one_tailed(a: &[f64], b: &[f64]) -> Result<f64> {
    let (ranks, positive, ties) = signed_ranks(a, b)?;
    let w_plus: f64 = ranks.iter().zip(&positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let n = ranks.len();
    if n <= EXACT_LIMIT {
        return Ok(exact_upper_tail(&ranks, w_plus));
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let z = (w_plus - mean) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Stats(e.to_string()))?;
    Ok(normal.sf(z))
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// One-tailed Welch t test of the alternative `mean(x) > mean(y)`.
pub fn welch_t_one_tailed(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Stats("each sample needs at least two values".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Stats("non-finite sample value".into()));
    }
    let (mx, vx) = mean_var(x);
    let (my, vy) = mean_var(y);
    let (sx, sy) = (vx / x.len() as f64, vy / y.len() as f64);
    let se2 = sx + sy;
    if se2 <= 0.0 {
        return Err(Error::Stats("both samples have zero variance".into()));
    }
    let t = (mx - my) / se2.sqrt();
    let df = se2 * se2 / (sx * sx / (x.len() as f64 - 1.0) + sy * sy / (y.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Stats(e.to_string()))?;
    Ok(dist.sf(t))
}
