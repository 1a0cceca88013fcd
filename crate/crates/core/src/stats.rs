//! Rank-based significance tests (Mann-Whitney U, Wilcoxon signed-rank)
//! with normal approximations, exact enumeration oracles for small samples,
//! and mean / standard-error summaries.
//!
//! Approximation gap: the reported p-values always come from the tie- and
//! continuity-corrected normal approximation. At very small sample sizes
//! (all groups <= 7) the exact enumeration p is coarsely quantized and the
//! approximation can deviate from it by up to ~0.4 (worst near n = 2);
//! deviations above 0.05 are routine at those sizes. Use the
//! `*_exact_p` enumeration functions when small-sample exactness matters.

use crate::error::{Error, Result};

/// Fractional (average) ranks, 1-based, ties share the mean rank.
pub(crate) fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Tie-count term sum over groups: sum(t^3 - t).
fn tie_term(sorted_combined: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut i = 0;
    while i < sorted_combined.len() {
        let mut j = i + 1;
        while j < sorted_combined.len() && sorted_combined[j] == sorted_combined[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        sum += t * t * t - t;
        i = j;
    }
    sum
}

/// Standard normal CDF (Abramowitz-Stegun 7.1.26 rational approximation of
/// erf, absolute error below 1.5e-7).
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    poly * (-x * x).exp()
}

/// Mann-Whitney U test. Returns (U, two-sided p) where U is the statistic of
/// the first sample and p comes from the normal approximation with tie and
/// continuity corrections. When all values across both samples are identical
/// the test is degenerate and p = 1.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let (n1, n2) = (a.len(), b.len());
    if n1 < 2 || n2 < 2 {
        return Err(Error::InvalidArgument {
            op: "mann_whitney_u",
            detail: format!("need at least 2 samples per group, got {n1} and {n2}"),
        });
    }
    let mut combined: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&combined);
    let r1: f64 = ranks[..n1].iter().sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;

    combined.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = (n1 + n2) as f64;
    let ties = tie_term(&combined);
    let mean = (n1 * n2) as f64 / 2.0;
    let var = (n1 * n2) as f64 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok((u, 1.0));
    }
    let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let p = (2.0 * (1.0 - normal_cdf(z))).clamp(0.0, 1.0);
    Ok((u, p))
}

/// Exact two-sided Mann-Whitney p-value by enumerating all group
/// assignments of the combined sample. Feasible for small samples only.
pub fn mann_whitney_exact_p(a: &[f64], b: &[f64]) -> f64 {
    let (n1, n2) = (a.len(), b.len());
    let combined: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&combined);
    let observed: f64 = ranks[..n1].iter().sum::<f64>() - (n1 * (n1 + 1)) as f64 / 2.0;

    let n = n1 + n2;
    let mut us = Vec::new();
    let mut pick = Vec::with_capacity(n1);
    enumerate_subsets(n, n1, 0, &mut pick, &mut |subset| {
        let r: f64 = subset.iter().map(|&i| ranks[i]).sum();
        us.push(r - (n1 * (n1 + 1)) as f64 / 2.0);
    });
    let total = us.len() as f64;
    let eps = 1e-9;
    let le = us.iter().filter(|&&u| u <= observed + eps).count() as f64;
    let ge = us.iter().filter(|&&u| u >= observed - eps).count() as f64;
    (2.0 * (le.min(ge)) / total).min(1.0)
}

fn enumerate_subsets(
    n: usize,
    k: usize,
    start: usize,
    pick: &mut Vec<usize>,
    f: &mut impl FnMut(&[usize]),
) {
    if pick.len() == k {
        f(pick);
        return;
    }
    for i in start..n {
        if n - i < k - pick.len() {
            break;
        }
        pick.push(i);
        enumerate_subsets(n, k, i + 1, pick, f);
        pick.pop();
    }
}

fn signed_rank_parts(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument {
            op: "wilcoxon_signed_rank",
            detail: format!("paired samples differ in length: {} vs {}", a.len(), b.len()),
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument {
            op: "wilcoxon_signed_rank",
            detail: "need at least 2 pairs".into(),
        });
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x - y)
        .filter(|&d| d != 0.0)
        .collect();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    Ok((diffs, ranks))
}

/// Wilcoxon signed-rank test on paired samples (zero differences dropped).
/// Returns (W, two-sided p) with W = min(W+, W-) and a tie- and
/// continuity-corrected normal approximation. All-zero differences give
/// p = 1.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let (diffs, ranks) = signed_rank_parts(a, b)?;
    if diffs.is_empty() {
        return Ok((0.0, 1.0));
    }
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, &r)| r)
        .sum();
    let m = diffs.len() as f64;
    let total = m * (m + 1.0) / 2.0;
    let w = w_plus.min(total - w_plus);

    let mut abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    abs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mean = m * (m + 1.0) / 4.0;
    let var = m * (m + 1.0) * (2.0 * m + 1.0) / 24.0 - tie_term(&abs) / 48.0;
    if var <= 0.0 {
        return Ok((w, 1.0));
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let p = (2.0 * (1.0 - normal_cdf(z))).clamp(0.0, 1.0);
    Ok((w, p))
}

/// Exact two-sided Wilcoxon p-value by enumerating all 2^m sign patterns of
/// the nonzero differences.
pub fn wilcoxon_exact_p(a: &[f64], b: &[f64]) -> f64 {
    let (diffs, ranks) = match signed_rank_parts(a, b) {
        Ok(v) => v,
        Err(_) => return 1.0,
    };
    if diffs.is_empty() {
        return 1.0;
    }
    let observed: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, &r)| r)
        .sum();
    let m = diffs.len();
    let total = 1usize << m;
    let eps = 1e-9;
    let mut le = 0usize;
    let mut ge = 0usize;
    for pattern in 0..total {
        let t: f64 = (0..m)
            .filter(|&i| pattern & (1 << i) != 0)
            .map(|i| ranks[i])
            .sum();
        if t <= observed + eps {
            le += 1;
        }
        if t >= observed - eps {
            ge += 1;
        }
    }
    (2.0 * (le.min(ge) as f64) / total as f64).min(1.0)
}

/// Sample mean and standard error s / sqrt(n) with the n-1 denominator.
pub fn mean_stderr(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return Err(Error::InvalidArgument {
            op: "mean_stderr",
            detail: format!("need at least 2 values, got {}", xs.len()),
        });
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}
