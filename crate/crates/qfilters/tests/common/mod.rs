//! Reference implementations used only as test oracles. Each one is written
//! independently of the library code it checks.

#![allow(dead_code)]

use std::collections::BTreeSet;

/// One-sided Jacobi SVD of a row-major `rows × cols` matrix. Returns the
/// singular values and the right singular vectors (as columns of `v`,
/// returned row-major `cols × cols`), unsorted.
pub fn jacobi_svd(a: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut u = a.to_vec();
    let mut v = vec![0.0; cols * cols];
    for i in 0..cols {
        v[i * cols + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in p + 1..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in 0..rows {
                    let (x, y) = (u[r * cols + p], u[r * cols + q]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let (x, y) = (u[r * cols + p], u[r * cols + q]);
                    u[r * cols + p] = c * x - s * y;
                    u[r * cols + q] = s * x + c * y;
                }
                for r in 0..cols {
                    let (x, y) = (v[r * cols + p], v[r * cols + q]);
                    v[r * cols + p] = c * x - s * y;
                    v[r * cols + q] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let sigma = (0..cols)
        .map(|j| (0..rows).map(|r| u[r * cols + j].powi(2)).sum::<f64>().sqrt())
        .collect();
    (sigma, v)
}

/// Right singular vector of the largest singular value.
pub fn jacobi_top_direction(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let (sigma, v) = jacobi_svd(a, rows, cols);
    let j = (0..cols).max_by(|&x, &y| sigma[x].total_cmp(&sigma[y])).unwrap();
    (0..cols).map(|r| v[r * cols + j]).collect()
}

/// Average ranks by counting: rank = 1 + #smaller + (#equal − 1) / 2.
pub fn naive_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&xi| {
            let smaller = x.iter().filter(|&&y| y < xi).count() as f64;
            let equal = x.iter().filter(|&&y| y == xi).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub fn naive_spearman(x: &[f64], y: &[f64]) -> f64 {
    naive_pearson(&naive_ranks(x), &naive_ranks(y))
}

/// Kept positions by pairwise counting: an unprotected entry survives iff
/// fewer than `free` unprotected entries beat it, where a beats b when it
/// has the larger score, or the same score and the larger position.
pub fn eviction_oracle(positions: &[usize], scores: &[f64], budget: usize, protected: &BTreeSet<usize>) -> BTreeSet<usize> {
    let n_protected = positions.iter().filter(|p| protected.contains(p)).count();
    let free = budget.saturating_sub(n_protected);
    let beats = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && positions[a] > positions[b]);
    let mut kept = BTreeSet::new();
    for i in 0..positions.len() {
        if protected.contains(&positions[i]) {
            kept.insert(positions[i]);
            continue;
        }
        let better = (0..positions.len())
            .filter(|&j| j != i && !protected.contains(&positions[j]) && beats(j, i))
            .count();
        if better < free {
            kept.insert(positions[i]);
        }
    }
    kept
}

/// `S_t` by a double loop over the full map.
pub fn naive_average_attention(map: &[Vec<f64>]) -> Vec<f64> {
    let l = map.len();
    (0..l)
        .map(|t| {
            let mut s = 0.0;
            let mut n = 0;
            for row in map.iter().skip(t) {
                s += row[t];
                n += 1;
            }
            s / n as f64
        })
        .collect()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}
