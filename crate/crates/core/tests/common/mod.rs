//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;

/// Nearest-observation intervals and values by direct search.
/// Returns `(delta_last, delta_next, v_last, v_next)`.
pub fn recurrence_oracle(
    values: &Array2<f64>,
    mask: &Array2<f64>,
    delta: &Array2<f64>,
) -> [Array2<f64>; 4] {
    let (n, t) = mask.dim();
    let mut out = [
        Array2::zeros((n, t)),
        Array2::zeros((n, t)),
        Array2::zeros((n, t)),
        Array2::zeros((n, t)),
    ];
    for i in 0..n {
        // absolute time of each step
        let mut time = vec![0.0; t];
        for s in 1..t {
            time[s] = time[s - 1] + delta[[i, s]];
        }
        for s in 0..t {
            match (0..s).rev().find(|&k| mask[[i, k]] == 1.0) {
                Some(k) => {
                    out[0][[i, s]] = time[s] - time[k];
                    out[2][[i, s]] = values[[i, k]];
                }
                None => out[0][[i, s]] = time[s] - time[0],
            }
            match (s + 1..t).find(|&k| mask[[i, k]] == 1.0) {
                Some(k) => {
                    out[1][[i, s]] = time[k] - time[s];
                    out[3][[i, s]] = values[[i, k]];
                }
                None => out[1][[i, s]] = time[t - 1] - time[s],
            }
        }
    }
    out
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting
/// one half, as an exact fraction `(twice the count, 2 * pairs)`.
pub fn auroc_pairs(scores: &[f64], labels: &[u8]) -> (u64, u64) {
    let mut twice = 0u64;
    let mut pairs = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1;
            twice += if si > sj {
                2
            } else if si == sj {
                1
            } else {
                0
            };
        }
    }
    (twice, 2 * pairs)
}

/// Precision-recall step integral: for every distinct threshold, from high
/// to low, add `(recall gain) * precision` at that threshold.
pub fn auprc_steps(scores: &[f64], labels: &[u8]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for th in thresholds {
        let called: Vec<usize> = (0..scores.len()).filter(|&k| scores[k] >= th).collect();
        let tp = called.iter().filter(|&&k| labels[k] == 1).count() as f64;
        let recall = tp / pos;
        let precision = tp / called.len() as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    area
}
